"""Cross-language check: the engine's remote oracle client against the mock
guidance service over real HTTP. Skipped when node or the built service is
absent, so the engine suite stands alone.
"""

import json
import pathlib
import shutil
import subprocess
import time

import numpy as np
import pytest

from splatforge import guidance
from splatforge.cameras import yaw_ring

SIDECAR_DIST = pathlib.Path(__file__).resolve().parent.parent / "sidecar" / "dist" / "server.js"

pytestmark = pytest.mark.skipif(
    shutil.which("node") is None or not SIDECAR_DIST.exists(),
    reason="node or the built sidecar is not available",
)


@pytest.fixture(scope="module")
def sidecar():
    proc = subprocess.Popen(
        ["node", str(SIDECAR_DIST), "--mock", "--port", "0", "--mock-value", "0"],
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        text=True,
    )
    try:
        line = proc.stdout.readline()
        info = json.loads(line)
        assert info["listening"] is True
        yield f"http://127.0.0.1:{info['port']}"
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def stage1_shaped_request():
    """Four orthogonal views in one joint request, as the prior stage sends."""
    poses = yaw_ring(4, resolution=(64, 64))
    rng = np.random.default_rng(0)
    return guidance.GuidanceRequest(
        images=rng.random((4, 64, 64, 3)),
        timestep=0.5,
        prompt="a terracotta sphere",
        poses=poses,
        cfg_scale=100.0,
        noise_seed=42,
    )


def test_mock_sidecar_round_trip(sidecar):
    oracle = guidance.RemoteOracle(sidecar, kind=guidance.NOISE_KIND)
    oracle.check_reachable()
    request = stage1_shaped_request()
    response = oracle.predict(request)
    response.validate_against(request)
    assert response.kind == guidance.NOISE_KIND
    assert response.tensors.shape == (4, 64, 64, 3)
    assert np.all(response.tensors == 0.0)


def test_image_grad_kind_passes_through(sidecar):
    oracle = guidance.RemoteOracle(sidecar, kind=guidance.IMAGE_GRAD_KIND)
    response = oracle.predict(stage1_shaped_request())
    assert response.kind == guidance.IMAGE_GRAD_KIND


def test_sidecar_rejects_short_payload(sidecar):
    import requests

    request = stage1_shaped_request()
    body = guidance.request_to_wire(request)
    body["batch"] = 8  # disagrees with the 4-view payload
    body["poses"] = []
    resp = requests.post(sidecar + "/v1/predict", json=body, timeout=10)
    assert resp.status_code == 400
