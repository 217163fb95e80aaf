"""OBJ/MTL/PNG export for textured meshes, plus the OBJ reader used in tests."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .meshing import TexturedMesh, vertex_normals
from .texture import MaterialMaps


def _quantize(map01: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit, rounding half up."""
    return np.floor(np.clip(map01, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_mesh(mesh: TexturedMesh, materials: MaterialMaps, directory):
    """Write mesh.obj, mesh.mtl, and the three material PNGs into directory.

    The roughness-metallic map is packed as R=roughness, G=metallic, B=0.
    """
    if mesh.uvs is None:
        raise ValueError("mesh has no UVs; run uv_unwrap first")
    os.makedirs(directory, exist_ok=True)

    Image.fromarray(_quantize(materials.k_d)).save(os.path.join(directory, "diffuse.png"))
    rm = np.zeros(materials.k_rm.shape[:2] + (3,))
    rm[..., :2] = materials.k_rm
    Image.fromarray(_quantize(rm)).save(os.path.join(directory, "roughness_metallic.png"))
    Image.fromarray(_quantize(materials.k_n)).save(os.path.join(directory, "normal.png"))

    with open(os.path.join(directory, "mesh.mtl"), "w") as f:
        f.write("newmtl material0\n")
        f.write("map_Kd diffuse.png\n")
        f.write("map_Pr roughness_metallic.png\n")
        f.write("map_Bump normal.png\n")

    normals = mesh.normals
    if normals is None:
        normals = vertex_normals(mesh.vertices, mesh.triangles)
    with open(os.path.join(directory, "mesh.obj"), "w") as f:
        f.write("mtllib mesh.mtl\nusemtl material0\n")
        for v in mesh.vertices:
            f.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for n in normals:
            f.write(f"vn {n[0]:.8f} {n[1]:.8f} {n[2]:.8f}\n")
        for uv in mesh.uvs.reshape(-1, 2):
            f.write(f"vt {uv[0]:.8f} {uv[1]:.8f}\n")
        for fi, tri in enumerate(mesh.triangles):
            corners = [
                f"{tri[k] + 1}/{3 * fi + k + 1}/{tri[k] + 1}" for k in range(3)
            ]
            f.write("f " + " ".join(corners) + "\n")


def import_obj(path) -> TexturedMesh:
    """Minimal OBJ reader for round-trip tests (v/vn/vt/f with v/vt/vn faces)."""
    vertices, normals, uvs, faces, face_uvs = [], [], [], [], []
    with open(path) as f:
        for line in f:
            tokens = line.split()
            if not tokens:
                continue
            if tokens[0] == "v":
                vertices.append([float(x) for x in tokens[1:4]])
            elif tokens[0] == "vn":
                normals.append([float(x) for x in tokens[1:4]])
            elif tokens[0] == "vt":
                uvs.append([float(x) for x in tokens[1:3]])
            elif tokens[0] == "f":
                idx = [t.split("/") for t in tokens[1:4]]
                faces.append([int(i[0]) - 1 for i in idx])
                face_uvs.append([int(i[1]) - 1 for i in idx])
    uvs = np.asarray(uvs)
    mesh = TexturedMesh(
        vertices=np.asarray(vertices),
        triangles=np.asarray(faces, dtype=np.int64),
        normals=np.asarray(normals) if normals else None,
        uvs=uvs[np.asarray(face_uvs, dtype=np.int64)] if len(faces) else None,
    )
    return mesh
