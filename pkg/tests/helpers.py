"""Small builders shared across test modules."""
import numpy as np

from mintlab import data


def random_manifest(source_id, n, seed, size=8, role=data.ROLE_EXTERNAL, num_classes=4,
                    pixels=None):
    rng = np.random.default_rng(seed)
    if pixels is None:
        pixels = rng.integers(0, 256, (n, size, size, 3), dtype=np.uint8)
    ids = [data.stable_id(source_id, i) for i in range(n)]
    classes = np.arange(n) % num_classes
    return data._sorted_manifest(source_id, role, ids, classes, list(range(n)), pixels)


def plant(d_manifest, e_manifest, d_rows, e_rows):
    """Copy D pixels over chosen E rows; returns the rebuilt E manifest."""
    px = e_manifest.pixels.copy()
    px[list(e_rows)] = d_manifest.pixels[list(d_rows)]
    return data._sorted_manifest(e_manifest.source_id, e_manifest.role, e_manifest.ids,
                                 e_manifest.classes, e_manifest.locators, px)
