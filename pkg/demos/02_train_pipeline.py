"""End-to-end pipeline at desk scale: data, identity net, generator, figures.

Mirrors the full training story on a small synthetic dataset: generate labeled
identities, train the part-based identity network past its accuracy gate, then
train the U-Net texture generator against the re-identification feature loss
and render a training-progress strip.

Run from the repo root:  python3 demos/02_train_pipeline.py
Takes a few minutes on a laptop CPU. Outputs land in demos/out/.
"""

from pathlib import Path

from retexture import bodymodel, cli, dataio, idnet, trainer

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

IMAGE_DIMS = (128, 64)
TEXTURE_DIMS = (32, 32)

# --- dataset: 4 identities x 8 views --------------------------------------
body = bodymodel.make_desk_body(1)
spec = dataio.SyntheticDatasetSpec(
    n_identities=4, views_per_identity=8, image_dims=IMAGE_DIMS,
    texture_dims=TEXTURE_DIMS, seed=0,
)
index, _ = dataio.generate_synthetic_dataset(spec, body, OUT / "pipeline_data")
index, failures = dataio.precompute_render_tensors(
    index, body, IMAGE_DIMS, TEXTURE_DIMS, OUT / "pipeline_data" / "cache",
    workers=4,
)
assert not failures
split = dataio.split_by_views(index, test_views_per_identity=2)
print(f"dataset: {len(split.train.records)} train / {len(split.test.records)} test images")

# --- identity network ------------------------------------------------------
net, acc = idnet.train_idnet(split.train, idnet.IdNetConfig(seed=0))
print(f"identity net held-out top-1: {acc:.3f}")

# --- texture generator under the re-ID loss --------------------------------
config = trainer.TrainConfig(
    loss_variant="reid", max_iterations=300, epochs=10 ** 9,
    image_dims=IMAGE_DIMS, texture_dims=TEXTURE_DIMS, seed=0,
)
run_dir = OUT / "pipeline_run"
state = trainer.train(config, split.train, body, idnet=net,
                      checkpoint_dir=run_dir, log_file=run_dir / "train.log")
print(f"trained {state.iteration} iterations; checkpoints in {run_dir}")

# --- evaluation and progress strip -----------------------------------------
report, _ = trainer.evaluate(state.generator, split.test, body)
print(f"test: ssim={report.ssim:.4f} mask_ssim={report.mask_ssim:.4f}")

checkpoints = sorted(run_dir.glob("checkpoint_epoch_*.npz"))[:3]
checkpoints.append(run_dir / "checkpoint_final.npz")
rec = split.test.records[0]
cli.render_progress_strip(
    [str(c) for c in checkpoints], rec, OUT / "training_progress_strip.png", body
)
print(f"wrote {OUT / 'training_progress_strip.png'}")
