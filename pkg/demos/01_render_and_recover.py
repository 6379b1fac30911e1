"""Render a textured body from several poses, then recover the texture.

Walks the core renderer round trip: build the procedural body, pose it, bake
sparse render tensors, and then invert the pipeline by optimizing a free
texture under pixel-l1 through the renderer's exact adjoint. No neural nets
involved; this is the geometry/optics half of the project in isolation.

Run from the repo root:  python3 demos/01_render_and_recover.py
Outputs land in demos/out/.
"""

from pathlib import Path

import numpy as np

from retexture import bodymodel, dataio, rendering
from retexture.rendering import ImageTensor, Texture

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

IMAGE_DIMS = (128, 64)
TEXTURE_DIMS = (32, 32)

# --- one synthetic identity seen from four poses --------------------------
body = bodymodel.make_desk_body(1)
spec = dataio.SyntheticDatasetSpec(
    n_identities=1, views_per_identity=4, image_dims=IMAGE_DIMS,
    texture_dims=TEXTURE_DIMS, seed=7,
)
index, textures = dataio.generate_synthetic_dataset(spec, body, OUT / "data")
index, failures = dataio.precompute_render_tensors(
    index, body, IMAGE_DIMS, TEXTURE_DIMS, OUT / "data" / "cache"
)
assert not failures
gt = dataio.load_image(next(iter(textures.values()))).pixels
print(f"rendered {len(index.records)} views of one identity")

# --- texture recovery: Adam on the pixel-l1 subgradient -------------------
views = []
visible = np.zeros(TEXTURE_DIMS[0] * TEXTURE_DIMS[1], dtype=bool)
for rec in index.records:
    rt = rendering.load_render_tensor(rec.render_tensor_cache_path)
    target = dataio.load_image(rec.image_path, IMAGE_DIMS).pixels.reshape(-1, 3)
    views.append((rt, target, rt.coverage.ravel()))
    visible[np.unique(rt.texel_index)] = True

tex = np.full((visible.size, 3), 0.5)
m = np.zeros_like(tex)
v = np.zeros_like(tex)
for it in range(1, 501):
    grad = np.zeros_like(tex)
    for rt, target, covered in views:
        diff = rendering.apply_raw(rt, tex) - target
        diff[~covered] = 0.0
        grad += rendering.apply_transpose(
            rt, np.sign(diff).reshape(*IMAGE_DIMS, 3)
        ).reshape(-1, 3)
    m = 0.9 * m + 0.1 * grad
    v = 0.999 * v + 0.001 * grad ** 2
    step = (m / (1 - 0.9 ** it)) / (np.sqrt(v / (1 - 0.999 ** it)) + 1e-8)
    tex = np.clip(tex - 0.05 * step, 0.0, 1.0)
    if it % 100 == 0:
        mae = np.abs(tex - gt.reshape(-1, 3))[visible].mean()
        print(f"iter {it:4d}  visible-texel MAE {mae:.4f}")

# --- figures --------------------------------------------------------------
recovered = tex.reshape(*TEXTURE_DIMS, 3)
dataio.save_image(ImageTensor(np.concatenate([gt, recovered], axis=1)),
                  OUT / "texture_gt_vs_recovered.png")

bg = ImageTensor(np.full((*IMAGE_DIMS, 3), 0.5))
panels = []
for rt, target, _ in views:
    panels.append(target.reshape(*IMAGE_DIMS, 3))
    panels.append(rendering.apply(rt, Texture(recovered), bg).pixels)
dataio.save_image(ImageTensor(np.concatenate(panels, axis=1)),
                  OUT / "views_input_vs_rerender.png")
print(f"wrote figures to {OUT}")
