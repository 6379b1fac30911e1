"""Loss-variant ablation at desk scale.

Trains the generator once per supervision variant — re-ID feature loss,
pixel-l1, random perceptual features, deep (pooled) features, shuffled pose
operators, and a global (non-part) identity net — and prints the 4-metric
comparison table.

Run from the repo root:  python3 demos/03_loss_ablation.py
Takes several minutes on a laptop CPU. Outputs land in demos/out/.
"""

from pathlib import Path

from retexture import bodymodel, dataio, idnet, perceptual, trainer

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

IMAGE_DIMS = (64, 32)
TEXTURE_DIMS = (32, 32)
ITERATIONS = 100

body = bodymodel.make_desk_body(1)
spec = dataio.SyntheticDatasetSpec(
    n_identities=4, views_per_identity=8, image_dims=IMAGE_DIMS,
    texture_dims=TEXTURE_DIMS, seed=0,
)
index, _ = dataio.generate_synthetic_dataset(spec, body, OUT / "ablation_data")
split = dataio.split_by_views(index, test_views_per_identity=2)

config = trainer.TrainConfig(
    image_dims=IMAGE_DIMS, texture_dims=TEXTURE_DIMS,
    max_iterations=ITERATIONS, epochs=10 ** 9, seed=0,
)
cache = OUT / "ablation_data" / "cache"
train_index, f1 = dataio.precompute_render_tensors(
    split.train, body, IMAGE_DIMS, TEXTURE_DIMS, cache, workers=4
)
test_index, f2 = dataio.precompute_render_tensors(
    split.test, body, IMAGE_DIMS, TEXTURE_DIMS, cache, workers=4
)
assert not f1 and not f2

# identity nets sized for 64x32 inputs (2 stripe parts / global); short
# training budget — the ablation only needs plausible feature extractors
tc = idnet.IdNetTrainConfig(max_epochs=30, n_restarts=1, seed=0)
pcb_cfg = idnet.IdNetConfig(in_dims=(64, 32, 3), n_parts=2, n_classes=4, seed=0)
net_pcb, acc = idnet.train_idnet(split.train, pcb_cfg, tc)
print(f"part-based identity net held-out top-1: {acc:.3f}")
net_global, acc_g = idnet.train_idnet(
    split.train,
    idnet.IdNetConfig(in_dims=(64, 32, 3), n_parts=1, n_classes=4, seed=0),
    tc,
)
print(f"global identity net held-out top-1: {acc_g:.3f}")

images = [dataio.load_image(r.image_path, IMAGE_DIMS)
          for r in split.train.records[:16]]
perc = perceptual.train_perceptual(images, seed=0)

grid = ["reid", "pixel_l1", "perceptual", "deep_feature", "no_pose", "no_pcb"]
results = trainer.run_ablation(
    grid, config, train_index, test_index, body,
    idnet_pcb=net_pcb, idnet_global=net_global, perceptual=perc,
    no_pose_cache_dir=OUT / "ablation_data" / "no_pose_cache",
)
table = trainer.format_ablation_table(results)
print(table)
trainer.save_ablation_table(results, OUT / "ablation_table.txt")
print(f"wrote {OUT / 'ablation_table.txt'}")
