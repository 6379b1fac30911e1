"""Command-line entry point orchestrating the texture-generation pipeline.

Verbs: make-body, synth-data, precompute, train-idnet, train, generate, render,
evaluate, ablate. Every verb accepts --seed and --config; all figure output is
lossless PNG so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from retexture import bodymodel, dataio, idnet as idnet_mod, perceptual, rendering, trainer
from retexture import generator as gen_mod
from retexture.errors import RetextureError
from retexture.losses import LossWeights
from retexture.rendering import ImageTensor
from retexture.trainer import TrainConfig


def _dims(text: str) -> tuple[int, int]:
    h, w = text.lower().split("x")
    return int(h), int(w)


def parse_config_file(path) -> dict:
    """key = value lines; # starts a comment. Dims use HxW, e.g. 128x64."""
    values = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise RetextureError(f"config line without '=': {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key] = val
    return values


def train_config_from(values: dict, seed: int | None = None) -> TrainConfig:
    cfg = TrainConfig()
    kwargs = {}
    float_keys = {"learning_rate", "beta1", "beta2", "weight_decay"}
    int_keys = {
        "batch_size", "groups_per_batch", "images_per_group", "epochs",
        "max_iterations", "gen_depth", "gen_base_channels", "seed",
    }
    dim_keys = {"image_dims", "texture_dims"}
    weights = {}
    for key, val in values.items():
        if key in float_keys:
            kwargs[key] = float(val)
        elif key in int_keys:
            kwargs[key] = int(val)
        elif key in dim_keys:
            kwargs[key] = _dims(val)
        elif key == "loss_variant":
            kwargs[key] = val
        elif key in ("lambda_reid", "lambda_face"):
            weights[key] = float(val)
        else:
            raise RetextureError(f"unknown config key '{key}'")
    if weights:
        kwargs["weights"] = LossWeights(
            lambda_reid=weights.get("lambda_reid", cfg.weights.lambda_reid),
            lambda_face=weights.get("lambda_face", cfg.weights.lambda_face),
        )
    if seed is not None:
        kwargs["seed"] = seed
    return replace(cfg, **kwargs)


def _load_train_config(args) -> TrainConfig:
    values = parse_config_file(args.config) if args.config else {}
    return train_config_from(values, seed=args.seed)


def _images_dir(data_dir: Path) -> Path:
    sub = data_dir / "images"
    return sub if sub.is_dir() else data_dir


def _scan(data_dir, test_views: int = 2):
    scan = dataio.scan_dataset(_images_dir(Path(data_dir)), test_identities=[])
    return dataio.split_by_views(scan.train, test_views_per_identity=test_views)


# ---------------------------------------------------------------------------
# Verb implementations
# ---------------------------------------------------------------------------


def cmd_make_body(args):
    spec = bodymodel.make_desk_body(args.resolution)
    bodymodel.save_model(spec, args.out)
    print(f"wrote body model with {spec.num_vertices} vertices to {args.out}")
    return 0


def cmd_synth_data(args):
    body = bodymodel.load_model(args.body) if args.body else bodymodel.make_desk_body(args.resolution)
    spec = dataio.SyntheticDatasetSpec(
        n_identities=args.ids,
        views_per_identity=args.views,
        image_dims=_dims(args.image_dims),
        texture_dims=_dims(args.texture_dims),
        seed=args.seed or 0,
    )
    index, textures = dataio.generate_synthetic_dataset(spec, body, args.out)
    print(f"wrote {len(index.records)} images for {len(textures)} identities to {args.out}")
    return 0


def cmd_precompute(args):
    body = bodymodel.load_model(args.body)
    scan = dataio.scan_dataset(_images_dir(Path(args.data)), test_identities=[])
    index, failures = dataio.precompute_render_tensors(
        scan.train,
        body,
        _dims(args.image_dims),
        _dims(args.texture_dims),
        args.cache,
        workers=args.workers,
    )
    for fail in failures:
        print(f"failed: {fail}", file=sys.stderr)
    print(f"cached {len(index.records)} render tensors in {args.cache}")
    return 0


def idnet_train_config_from(values: dict, seed: int | None = None) -> "idnet_mod.IdNetTrainConfig":
    kwargs = {}
    float_keys = {"learning_rate", "heldout_fraction", "accuracy_gate", "recon_weight"}
    int_keys = {"batch_size", "max_epochs", "n_restarts", "seed"}
    for key, val in values.items():
        if key in float_keys:
            kwargs[key] = float(val)
        elif key in int_keys:
            kwargs[key] = int(val)
        else:
            raise RetextureError(f"unknown config key '{key}'")
    if seed is not None:
        kwargs["seed"] = seed
    return replace(idnet_mod.IdNetTrainConfig(), **kwargs)


def cmd_train_idnet(args):
    scan = _scan(args.data)
    n_parts = 1 if args.variant == "global" else 6
    config = idnet_mod.IdNetConfig(n_parts=n_parts, seed=args.seed or 0)
    values = parse_config_file(args.config) if args.config else {}
    tc = idnet_train_config_from(values, seed=args.seed)
    net, acc = idnet_mod.train_idnet(scan.train, config, tc)
    idnet_mod.save_idnet(net, args.out)
    print(f"trained {args.variant} identity net, held-out top-1 = {acc:.3f}, saved to {args.out}")
    return 0


def cmd_train(args):
    config = _load_train_config(args)
    if args.iterations is not None:
        config = replace(config, max_iterations=args.iterations, epochs=10**9)
    body = bodymodel.load_model(args.body)
    scan = _scan(args.data)
    index, _ = dataio.precompute_render_tensors(
        scan.train, body, config.image_dims, config.texture_dims, args.cache, workers=1
    ) if args.precompute else (_attach_caches(scan.train, args.cache), None)
    net = idnet_mod.load_idnet(args.idnet) if args.idnet else None
    state = trainer.train(config, index, body, idnet=net, checkpoint_dir=args.out,
                          log_file=Path(args.out) / "train.log", resume=args.resume)
    print(f"trained {state.iteration} iterations; checkpoints in {args.out}")
    return 0


def _attach_caches(index, cache_dir):
    from dataclasses import replace as drep

    cache_dir = Path(cache_dir)
    records = []
    for rec in index.records:
        cache = cache_dir / (Path(rec.image_path).stem + dataio.CACHE_SUFFIX)
        if not cache.exists():
            raise RetextureError(
                f"missing render-tensor cache {cache.name}; run 'retexture precompute' first"
            )
        records.append(drep(rec, render_tensor_cache_path=cache))
    return dataio.DatasetIndex(records, split=index.split)


def cmd_generate(args):
    gen = gen_mod.load_checkpoint(args.checkpoint)
    cfg = gen.config
    img = dataio.load_image(args.image, (cfg.in_dims[0], cfg.in_dims[1]))
    tex = gen_mod.generator_forward(gen, img)
    dataio.save_image(ImageTensor(tex.pixels), args.out)
    print(f"wrote texture to {args.out}")
    return 0


def cmd_render(args):
    body = bodymodel.load_model(args.body)
    if args.checkpoints:
        rec = dataio.Record(
            image_path=Path(args.image),
            identity_id=0 if args.image else 0,
            pose_sidecar_path=Path(args.sidecar),
        )
        render_progress_strip(args.checkpoints, rec, args.out, body)
        print(f"wrote progress strip to {args.out}")
        return 0
    tex = rendering.Texture(dataio.load_image(args.texture).pixels)
    sidecar = dataio.load_pose_sidecar(args.sidecar)
    mesh = dataio.posed_mesh_from_sidecar(body, sidecar)
    dims = _dims(args.image_dims)
    rt = rendering.build_render_tensor(mesh, sidecar.camera, dims, tex.pixels.shape[:2])
    bg = ImageTensor(np.full((*dims, 3), 0.5))
    dataio.save_image(rendering.apply(rt, tex, bg), args.out)
    print(f"wrote render to {args.out}")
    return 0


def render_progress_strip(checkpoints, record, out_image, body) -> None:
    """Horizontal strip: the input image followed by one render per checkpoint."""
    panels = []
    first = gen_mod.load_checkpoint(checkpoints[0])
    dims = (first.config.in_dims[0], first.config.in_dims[1])
    tex_dims = (first.config.out_dims[0], first.config.out_dims[1])
    img = dataio.load_image(record.image_path, dims)
    panels.append(img.pixels)
    sidecar = dataio.load_pose_sidecar(record.pose_sidecar_path)
    mesh = dataio.posed_mesh_from_sidecar(body, sidecar)
    rt = rendering.build_render_tensor(mesh, sidecar.camera, dims, tex_dims)
    bg = ImageTensor(np.full((*dims, 3), 0.5))
    for ckpt in checkpoints:
        if not Path(ckpt).exists():
            raise RetextureError(f"missing checkpoint {ckpt}")
        gen = gen_mod.load_checkpoint(ckpt)
        tex = gen_mod.generator_forward(gen, img)
        panels.append(rendering.apply(rt, tex, bg).pixels)
    strip = np.concatenate(panels, axis=1)
    dataio.save_image(ImageTensor(strip), out_image)


def cmd_evaluate(args):
    body = bodymodel.load_model(args.body)
    gen = gen_mod.load_checkpoint(args.checkpoint)
    scan = _scan(args.data)
    index = scan.test or scan.train
    classifier = None
    if args.idnet:
        classifier = idnet_mod.identity_classifier(idnet_mod.load_idnet(args.idnet))
    report, per_image = trainer.evaluate(gen, index, body, classifier=classifier)
    trainer.save_metric_report(report, per_image, args.out)
    print(
        f"n={report.n_images} ssim={report.ssim:.4f} mask_ssim={report.mask_ssim:.4f} "
        f"is={report.is_score:.3f} mask_is={report.mask_is:.3f}"
    )
    return 0


def cmd_ablate(args):
    config = _load_train_config(args)
    config = replace(config, max_iterations=args.iterations, epochs=10**9)
    body = bodymodel.load_model(args.body)
    scan = _scan(args.data)
    cache_dir = Path(args.cache)
    train_index, _ = dataio.precompute_render_tensors(
        scan.train, body, config.image_dims, config.texture_dims, cache_dir / "aligned"
    )
    test_index, _ = dataio.precompute_render_tensors(
        scan.test, body, config.image_dims, config.texture_dims, cache_dir / "aligned"
    )
    net_pcb = idnet_mod.load_idnet(args.idnet)
    net_global = idnet_mod.load_idnet(args.idnet_global) if args.idnet_global else None
    perc = None
    grid = args.grid.split(",")
    if "perceptual" in grid:
        images = [dataio.load_image(r.image_path, config.image_dims) for r in scan.train.records[:16]]
        perc = perceptual.train_perceptual(images, seed=config.seed)
    results = trainer.run_ablation(
        grid, config, train_index, test_index, body,
        idnet_pcb=net_pcb, idnet_global=net_global, perceptual=perc,
        no_pose_cache_dir=cache_dir / "no_pose",
    )
    trainer.save_ablation_table(results, args.out)
    print(trainer.format_ablation_table(results))
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retexture", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None, help="key = value config file")

    p = sub.add_parser("make-body", help="write the procedural body model")
    common(p)
    p.add_argument("--resolution", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_make_body)

    p = sub.add_parser("synth-data", help="generate a synthetic labeled dataset")
    common(p)
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--image-dims", default="128x64")
    p.add_argument("--texture-dims", default="32x32")
    p.add_argument("--body", default=None)
    p.add_argument("--resolution", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("precompute", help="cache render tensors for a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--body", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--image-dims", default="128x64")
    p.add_argument("--texture-dims", default="32x32")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_precompute)

    p = sub.add_parser("train-idnet", help="train the identity feature network")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=["pcb", "global"], default="pcb")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_idnet)

    p = sub.add_parser("train", help="train the texture generator")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--body", required=True)
    p.add_argument("--idnet", default=None)
    p.add_argument("--cache", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--precompute", action="store_true", help="build missing caches first")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="generate a texture from one image")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("render", help="render a texture, or a training-progress strip")
    common(p)
    p.add_argument("--body", required=True)
    p.add_argument("--texture", default=None)
    p.add_argument("--sidecar", required=True)
    p.add_argument("--image-dims", default="128x64")
    p.add_argument("--checkpoints", nargs="*", default=None, help="progress-strip mode")
    p.add_argument("--image", default=None, help="input panel for the progress strip")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--body", required=True)
    p.add_argument("--idnet", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the loss-variant comparison grid")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--body", required=True)
    p.add_argument("--idnet", required=True)
    p.add_argument("--idnet-global", default=None)
    p.add_argument("--cache", required=True)
    p.add_argument("--grid", default="reid,pixel_l1")
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if e.code is not None else 2
    try:
        return args.fn(args)
    except RetextureError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch())
