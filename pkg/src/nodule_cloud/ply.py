"""ASCII PLY export of sampled clouds: mask points red, context points blue."""

from .fileutil import atomic_write_text

MASK_RGB = (255, 0, 0)
BACKGROUND_RGB = (0, 0, 255)


def cloud_to_ply(cloud) -> str:
    lines = [
        "ply",
        "format ascii 1.0",
        f"comment candidate {cloud.candidate_ref or 'unknown'}",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for (x, y, z), m in zip(cloud.xyz.tolist(), cloud.is_mask.tolist()):
        r, g, b = MASK_RGB if m else BACKGROUND_RGB
        lines.append(f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}")  # 9 digits round-trip float32
    return "\n".join(lines) + "\n"


def write_ply(path, cloud) -> None:
    atomic_write_text(path, cloud_to_ply(cloud))
