"""Binary PLY import/export for splat clouds, using the de-facto layout:
x,y,z,nx,ny,nz,f_dc_0..2,opacity,scale_0..2,rot_0..3 as little-endian
float32 (normals written as zeros). Round trips are bit-exact.
"""

from __future__ import annotations

import numpy as np

from .gaussians import GaussianCloud

PROPERTIES = (
    "x", "y", "z",
    "nx", "ny", "nz",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)


class PlyParseError(ValueError):
    pass


def export_ply(cloud: GaussianCloud, path):
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {cloud.count}"]
    header += [f"property float {p}" for p in PROPERTIES]
    header.append("end_header")
    data = np.zeros((cloud.count, len(PROPERTIES)), dtype="<f4")
    data[:, 0:3] = cloud.positions
    data[:, 6:9] = cloud.colors
    data[:, 9] = cloud.opacity_logits
    data[:, 10:13] = cloud.log_scales
    data[:, 13:17] = cloud.rotations
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def import_ply(path) -> GaussianCloud:
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise PlyParseError(f"{path}: not a PLY file (missing header)")
    lines = blob[:end].decode("ascii", errors="replace").splitlines()
    count = None
    props = []
    fmt_ok = False
    for ln, line in enumerate(lines, 1):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            fmt_ok = tokens[1] == "binary_little_endian"
        elif tokens[0] == "element":
            if tokens[1] != "vertex":
                raise PlyParseError(f"{path}:{ln}: unsupported element '{tokens[1]}'")
            count = int(tokens[2])
        elif tokens[0] == "property":
            if tokens[1] != "float":
                raise PlyParseError(f"{path}:{ln}: property '{tokens[2]}' is not float")
            props.append(tokens[2])
    if not fmt_ok:
        raise PlyParseError(f"{path}: format must be binary_little_endian 1.0")
    if count is None:
        raise PlyParseError(f"{path}: missing 'element vertex' declaration")
    missing = [p for p in PROPERTIES if p not in props]
    if missing:
        raise PlyParseError(f"{path}: missing required properties: {', '.join(missing)}")

    body = blob[end + len(b"end_header\n"):]
    stride = len(props)
    expected = count * stride * 4
    if len(body) < expected:
        raise PlyParseError(
            f"{path}: element vertex declares {count} rows but data holds "
            f"{len(body) // (stride * 4)}"
        )
    data = np.frombuffer(body[:expected], dtype="<f4").reshape(count, stride)
    col = {p: data[:, i] for i, p in enumerate(props)}
    return GaussianCloud(
        positions=np.stack([col["x"], col["y"], col["z"]], axis=-1),
        log_scales=np.stack([col["scale_0"], col["scale_1"], col["scale_2"]], axis=-1),
        rotations=np.stack([col["rot_0"], col["rot_1"], col["rot_2"], col["rot_3"]], axis=-1),
        opacity_logits=col["opacity"].copy(),
        colors=np.stack([col["f_dc_0"], col["f_dc_1"], col["f_dc_2"]], axis=-1),
    )
