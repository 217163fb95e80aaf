"""Score-oracle contract: DDPM noising, classifier-free guidance mixing, and
the oracle implementations (analytic/photometric for self-contained runs, a
remote client speaking the wire protocol, and an in-process stub for tests).
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .cameras import CameraPose


class TransportError(RuntimeError):
    """Remote oracle could not be reached; retryable."""

    def __init__(self, message, attempts=1):
        super().__init__(message)
        self.attempts = attempts


class OracleProtocolError(RuntimeError):
    """Remote oracle replied with a malformed or out-of-contract response."""


class OracleDataError(RuntimeError):
    """Remote oracle returned non-finite tensor data."""


NOISE_KIND = "noise"
IMAGE_GRAD_KIND = "image_grad"


@dataclass
class GuidanceRequest:
    images: np.ndarray  # (B, H, W, 3) in [0, 1]
    timestep: float  # in (0, 1)
    prompt: str
    negative_prompt: str = ""
    poses: Sequence[CameraPose] = ()
    cfg_scale: float = 100.0
    noise_seed: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError(f"images must be (B, H, W, 3), got {self.images.shape}")
        if not 0.0 < self.timestep < 1.0:
            raise ValueError(f"timestep must lie in (0, 1), got {self.timestep}")
        if self.poses and len(self.poses) != self.images.shape[0]:
            raise ValueError(
                f"pose batch {len(self.poses)} does not match image batch {self.images.shape[0]}"
            )
        if self.cfg_scale < 0:
            raise ValueError(f"cfg_scale must be >= 0, got {self.cfg_scale}")


@dataclass
class GuidanceResponse:
    kind: str  # NOISE_KIND or IMAGE_GRAD_KIND
    tensors: np.ndarray  # same shape as the request images

    def validate_against(self, request: GuidanceRequest):
        if self.tensors.shape != request.images.shape:
            raise OracleProtocolError(
                f"response shape {self.tensors.shape} != request shape {request.images.shape}"
            )
        if not np.all(np.isfinite(self.tensors)):
            raise OracleDataError("response contains non-finite values")


class NoiseSchedule:
    """Cumulative signal coefficient alpha_bar(t) on (0, 1).

    Derived from a 1000-step scaled-linear beta table (linear in sqrt(beta)
    from 8.5e-4 to 1.2e-2, the StableDiffusion default) with nearest-index
    lookup.
    """

    def __init__(self, steps: int = 1000, beta_start: float = 8.5e-4, beta_end: float = 1.2e-2):
        betas = np.linspace(beta_start**0.5, beta_end**0.5, steps) ** 2
        self.alpha_bars = np.cumprod(1.0 - betas)
        self.steps = steps

    def index(self, t: float) -> int:
        if not 0.0 < t < 1.0:
            raise ValueError(f"timestep must lie in (0, 1), got {t}")
        return int(round(t * (self.steps - 1)))

    def alpha_bar(self, t: float) -> float:
        return float(self.alpha_bars[self.index(t)])


DEFAULT_SCHEDULE = NoiseSchedule()


def noise_from_seed(seed: int, shape) -> np.ndarray:
    """Deterministic standard-normal draw shared by the engine and oracles."""
    return np.random.default_rng(seed).standard_normal(shape)


def add_noise(image, epsilon, t: float, schedule: NoiseSchedule = DEFAULT_SCHEDULE):
    image = np.asarray(image, dtype=np.float64)
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if image.shape != epsilon.shape:
        raise ValueError(f"shape mismatch: image {image.shape} vs epsilon {epsilon.shape}")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * image + np.sqrt(1.0 - ab) * epsilon


def apply_cfg(eps_uncond, eps_cond, scale: float):
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError("shape mismatch between unconditional and conditional predictions")
    return eps_uncond + scale * (eps_cond - eps_uncond)


class AnalyticOracle:
    """Test/photometric oracle: the noise prediction that makes SDS a weighted
    image-matching loss against a known target.

    With x_t = sqrt(ab) x + sqrt(1-ab) eps, the exact prediction for target
    y* is (x_t - sqrt(ab) y*) / sqrt(1-ab) = eps + sqrt(ab/(1-ab)) (x - y*).
    The residual form is used so the SDS residual vanishes bit-exactly at the
    fixed point x == y*.
    """

    def __init__(self, target=None, target_fn: Optional[Callable] = None,
                 schedule: NoiseSchedule = DEFAULT_SCHEDULE):
        if target is None and target_fn is None:
            raise ValueError("analytic oracle needs a target image or a target_fn")
        self.target = None if target is None else np.asarray(target, dtype=np.float64)
        self.target_fn = target_fn
        self.schedule = schedule

    def _target_for(self, request: GuidanceRequest, i: int) -> np.ndarray:
        if self.target_fn is not None:
            pose = request.poses[i] if request.poses else None
            return np.asarray(self.target_fn(pose), dtype=np.float64)
        return np.broadcast_to(self.target, request.images.shape[1:])

    def predict(self, request: GuidanceRequest) -> GuidanceResponse:
        ab = self.schedule.alpha_bar(request.timestep)
        coeff = np.sqrt(ab / (1.0 - ab))
        eps = noise_from_seed(request.noise_seed, request.images.shape)
        preds = np.empty_like(request.images)
        for i in range(request.images.shape[0]):
            target = self._target_for(request, i)
            if target.shape != request.images.shape[1:]:
                raise ValueError(
                    f"target shape {target.shape} != image shape {request.images.shape[1:]}"
                )
            preds[i] = eps[i] + coeff * (request.images[i] - target)
        resp = GuidanceResponse(kind=NOISE_KIND, tensors=preds)
        resp.validate_against(request)
        return resp


class StubOracle:
    """Fixed-response oracle for protocol and engine tests."""

    def __init__(self, kind: str = NOISE_KIND, value: float = 0.0, tensor_fn=None):
        self.kind = kind
        self.value = value
        self.tensor_fn = tensor_fn
        self.calls = 0

    def predict(self, request: GuidanceRequest) -> GuidanceResponse:
        self.calls += 1
        if self.tensor_fn is not None:
            tensors = np.asarray(self.tensor_fn(request), dtype=np.float64)
        else:
            tensors = np.full_like(request.images, self.value)
        resp = GuidanceResponse(kind=self.kind, tensors=tensors)
        resp.validate_against(request)
        return resp


# Wire protocol --------------------------------------------------------------


def encode_tensor(t: np.ndarray) -> str:
    """Base64 of little-endian float32, batch-major then row-major H x W x 3."""
    return base64.b64encode(np.ascontiguousarray(t, dtype="<f4").tobytes()).decode("ascii")


def decode_tensor(b64: str, shape) -> np.ndarray:
    raw = base64.b64decode(b64)
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise OracleProtocolError(f"tensor payload is {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def request_to_wire(request: GuidanceRequest, kind: str = NOISE_KIND) -> dict:
    b, h, w, _ = request.images.shape
    return {
        "kind": kind,
        "prompt": request.prompt,
        "negative_prompt": request.negative_prompt,
        "cfg_scale": float(request.cfg_scale),
        "timestep": float(request.timestep),
        "noise_seed": int(request.noise_seed),
        "width": int(w),
        "height": int(h),
        "batch": int(b),
        "poses": [
            {
                "azimuth": float(p.azimuth),
                "elevation": float(p.elevation),
                "radius": float(p.radius),
                "fov_y": float(p.fov_y),
            }
            for p in request.poses
        ],
        "images_b64": encode_tensor(request.images),
    }


class RemoteOracle:
    """Client for the HTTP guidance protocol (POST /v1/predict)."""

    def __init__(self, endpoint: str, kind: str = NOISE_KIND, max_attempts: int = 3,
                 timeout: float = 60.0, session=None):
        self.endpoint = endpoint.rstrip("/")
        self.kind = kind
        self.max_attempts = max_attempts
        self.timeout = timeout
        if session is None:
            import requests

            session = requests.Session()
        self.session = session

    def predict(self, request: GuidanceRequest) -> GuidanceResponse:
        import requests

        body = request_to_wire(request, self.kind)
        url = self.endpoint + "/v1/predict"
        last_err = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self.session.post(url, json=body, timeout=self.timeout)
            except requests.RequestException as exc:
                last_err = exc
                continue
            if resp.status_code == 503:
                last_err = RuntimeError("oracle busy (503)")
                continue
            if resp.status_code != 200:
                raise OracleProtocolError(
                    f"oracle at {url} replied HTTP {resp.status_code}: {resp.text[:200]}"
                )
            try:
                payload = resp.json()
                kind = payload["kind"]
                tensors = decode_tensor(payload["tensors_b64"], request.images.shape)
            except OracleProtocolError:
                raise
            except Exception as exc:
                raise OracleProtocolError(f"malformed oracle response: {exc}") from exc
            if kind not in (NOISE_KIND, IMAGE_GRAD_KIND):
                raise OracleProtocolError(f"unknown response kind {kind!r}")
            out = GuidanceResponse(kind=kind, tensors=tensors)
            out.validate_against(request)
            return out
        raise TransportError(
            f"oracle at {url} unreachable after {self.max_attempts} attempts: {last_err}",
            attempts=self.max_attempts,
        )

    def check_reachable(self):
        """Probe the endpoint before starting a stage; raises TransportError."""
        import requests

        try:
            self.session.get(self.endpoint + "/healthz", timeout=5.0)
        except requests.RequestException as exc:
            raise TransportError(f"oracle endpoint {self.endpoint} unreachable: {exc}") from exc
