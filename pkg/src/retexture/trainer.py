"""End-to-end texture training: identity-grouped batching, hard triplet mining,
the Adam protocol, evaluation and the ablation harness.

The generator is the only trainable component; the identity network and the
perceptual extractor stay frozen. Rendering inside the step uses the
precomputed sparse operators, so each iteration is a sparse matmul plus the
U-Net forward/backward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from retexture import dataio, generator as gen_mod, idnet as idnet_mod, losses, metrics, rendering
from retexture.bodymodel import BodyModelSpec, face_hand_mask_at
from retexture.dataio import BackgroundPool, DatasetIndex
from retexture.errors import ConfigError, DatasetError, MiningError, ParameterError
from retexture.generator import GeneratorConfig, TextureGenerator
from retexture.idnet import IdNet
from retexture.losses import LossWeights, ReferenceTexture, TripletMargin
from retexture.metrics import MetricReport
from retexture.rendering import ImageTensor, Texture

LOSS_VARIANTS = ("reid", "pixel_l1", "perceptual", "softmax", "triplet", "deep_feature")
SETUP_VARIANTS = ("no_pose", "no_pcb")
ABLATION_VARIANTS = LOSS_VARIANTS + SETUP_VARIANTS


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-5
    batch_size: int = 16
    groups_per_batch: int = 4
    images_per_group: int = 4
    epochs: int = 120
    max_iterations: int | None = None
    loss_variant: str = "reid"
    weights: LossWeights = field(default_factory=LossWeights)
    triplet_margin: TripletMargin = field(default_factory=TripletMargin)
    image_dims: tuple[int, int] = (128, 64)
    texture_dims: tuple[int, int] = (64, 64)
    gen_depth: int = 4
    gen_base_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.batch_size != self.groups_per_batch * self.images_per_group:
            raise ConfigError(
                f"batch_size {self.batch_size} must equal groups_per_batch x images_per_group "
                f"= {self.groups_per_batch * self.images_per_group}"
            )
        for name in ("learning_rate", "beta1", "beta2"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.loss_variant not in LOSS_VARIANTS + SETUP_VARIANTS:
            raise ConfigError(f"unknown loss variant '{self.loss_variant}'")

    def generator_config(self) -> GeneratorConfig:
        h, w = self.image_dims
        h_t, w_t = self.texture_dims
        return GeneratorConfig(
            in_dims=(h, w, 3),
            out_dims=(h_t, w_t, 3),
            depth=self.gen_depth,
            base_channels=self.gen_base_channels,
            seed=self.seed,
        )


# ---------------------------------------------------------------------------
# Batch sampling and mining
# ---------------------------------------------------------------------------


def _groups(index: DatasetIndex, config: TrainConfig) -> dict[int, list]:
    by_id: dict[int, list] = {}
    for rec in index.records:
        by_id.setdefault(rec.identity_id, []).append(rec)
    usable = {
        pid: sorted(recs, key=lambda r: str(r.image_path))
        for pid, recs in by_id.items()
        if len(recs) >= config.images_per_group
    }
    if len(usable) < config.groups_per_batch:
        raise DatasetError(
            f"need {config.groups_per_batch} identities with >= {config.images_per_group} "
            f"images, got {len(usable)}"
        )
    return usable


def sample_batch(index: DatasetIndex, config: TrainConfig, rng: np.random.Generator):
    """One identity-grouped batch: groups_per_batch ids x images_per_group images.

    Identities and images are drawn uniformly without replacement; deterministic
    for a given generator state.
    """
    groups = _groups(index, config)
    ids = sorted(groups)
    chosen = rng.choice(len(ids), size=config.groups_per_batch, replace=False)
    batch = []
    for gi in sorted(chosen.tolist()):
        recs = groups[ids[gi]]
        picks = rng.choice(len(recs), size=config.images_per_group, replace=False)
        batch.extend(recs[i] for i in sorted(picks.tolist()))
    return batch


def mine_triplets(features, labels) -> list[tuple[int, int, int]]:
    """Batch-hard triples: per anchor the farthest positive and nearest negative.

    Ties break toward the lowest index. Raises MiningError if the batch holds a
    single identity.
    """
    f = features.detach().numpy() if isinstance(features, torch.Tensor) else np.asarray(features)
    f = f.reshape(len(f), -1).astype(np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise MiningError("triplet mining needs at least 2 identities in the batch")
    d = np.linalg.norm(f[:, None, :] - f[None, :, :], axis=2)
    triples = []
    for a in range(len(f)):
        same = (labels == labels[a]) & (np.arange(len(f)) != a)
        diff = labels != labels[a]
        if not same.any():
            continue
        pos_candidates = np.flatnonzero(same)
        pos = pos_candidates[int(np.argmax(d[a, pos_candidates]))]
        neg_candidates = np.flatnonzero(diff)
        neg = neg_candidates[int(np.argmin(d[a, neg_candidates]))]
        triples.append((a, int(pos), int(neg)))
    return triples


# ---------------------------------------------------------------------------
# Training state and steps
# ---------------------------------------------------------------------------


def make_reference_texture(body: BodyModelSpec, texture_dims: tuple[int, int]) -> ReferenceTexture:
    """Deterministic scanned-style reference for the face loss: a skin-tone base
    with slight shading, masked to the head/hand texel regions."""
    h_t, w_t = texture_dims
    yy = np.linspace(0, 1, h_t)[:, None]
    base = np.empty((h_t, w_t, 3))
    base[:, :, 0] = 0.85 - 0.08 * yy
    base[:, :, 1] = 0.68 - 0.06 * yy
    base[:, :, 2] = 0.55 - 0.05 * yy
    mask = face_hand_mask_at(body, texture_dims)
    return ReferenceTexture(texture=Texture(np.clip(base, 0, 1)), mask=mask)


class TrainState:
    """Everything the step function mutates, plus frozen supervision nets."""

    def __init__(
        self,
        config: TrainConfig,
        index: DatasetIndex,
        body: BodyModelSpec,
        idnet: IdNet | None = None,
        perceptual=None,
        background_pool: BackgroundPool | None = None,
    ):
        self.config = config
        self.index = index
        self.body = body
        self.idnet = idnet
        self.perceptual = perceptual
        if idnet is not None:
            for p in idnet.parameters():
                p.requires_grad_(False)
        self.generator = gen_mod.generator_init(config.generator_config())
        self.optimizer = torch.optim.AdamW(
            self.generator.parameters(),
            lr=config.learning_rate,
            betas=(config.beta1, config.beta2),
            weight_decay=config.weight_decay,
        )
        self.rng = np.random.default_rng(config.seed)
        self.background_pool = background_pool or BackgroundPool(
            None, config.image_dims, seed=config.seed
        )
        self.reference = make_reference_texture(body, config.texture_dims)
        self.iteration = 0
        self.epoch = 0
        self._rt_cache: dict[str, object] = {}
        self._image_cache: dict[str, torch.Tensor] = {}

    def render_operator(self, record):
        """Cached torch sparse operator + coverage for a record."""
        key = str(record.render_tensor_cache_path or record.image_path)
        if key not in self._rt_cache:
            if record.render_tensor_cache_path is None:
                raise ParameterError(
                    f"record {Path(record.image_path).name} has no render-tensor cache; "
                    "run precompute first"
                )
            try:
                rt = rendering.load_render_tensor(record.render_tensor_cache_path)
            except FileNotFoundError as e:
                raise ParameterError(
                    f"missing render-tensor cache for {Path(record.image_path).name}: {e}"
                ) from e
            cov = torch.tensor(rt.coverage.astype(np.float32)).reshape(-1, 1)
            self._rt_cache[key] = (rt.to_torch(), cov, rt)
        return self._rt_cache[key]

    def input_image(self, record) -> torch.Tensor:
        key = str(record.image_path)
        if key not in self._image_cache:
            img = dataio.load_image(record.image_path, self.config.image_dims)
            self._image_cache[key] = torch.tensor(img.pixels, dtype=torch.float32).permute(2, 0, 1)
        return self._image_cache[key]


def _render_batch(state: TrainState, textures: torch.Tensor, batch) -> torch.Tensor:
    """Apply each record's sparse operator to its generated texture, composite
    a sampled background on uncovered pixels."""
    h, w = state.config.image_dims
    outs = []
    for b, rec in enumerate(batch):
        mat, cov, _ = state.render_operator(rec)
        tex_flat = textures[b].permute(1, 2, 0).reshape(-1, 3)
        fg = torch.sparse.mm(mat, tex_flat)
        bg = state.background_pool.sample()
        bg_flat = torch.tensor(bg.pixels, dtype=torch.float32).reshape(-1, 3)
        out = fg + bg_flat * (1.0 - cov)
        outs.append(out.reshape(h, w, 3).permute(2, 0, 1))
    return torch.stack(outs)


def _similarity_loss(state: TrainState, x: torch.Tensor, y: torch.Tensor, batch) -> torch.Tensor:
    variant = state.config.loss_variant
    if variant in ("reid", "no_pose", "no_pcb"):
        ax = [a.detach() for a in state.idnet.feature_stack(x)]
        ay = state.idnet.feature_stack(y)
        total = x.new_zeros(())
        for la, lb in zip(ax, ay):
            diff = (lb - la).reshape(len(batch), -1)
            total = total + torch.linalg.vector_norm(diff, dim=1).sum()
        return total / len(batch)
    if variant == "pixel_l1":
        return (y - x).abs().sum() / len(batch)
    if variant == "perceptual":
        ax = [a.detach() for a in state.perceptual(x)]
        ay = state.perceptual(y)
        total = x.new_zeros(())
        for la, lb in zip(ax, ay):
            diff = (lb - la).reshape(len(batch), -1)
            total = total + torch.linalg.vector_norm(diff, dim=1).sum()
        return total / len(batch)
    if variant == "softmax":
        _, _, gs_x = state.idnet.part_features(x)
        _, _, gs_y = state.idnet.part_features(y)
        return losses.softmax_loss(gs_y, gs_x.detach()) / len(batch)
    if variant == "deep_feature":
        g1x, g2x, _ = state.idnet.part_features(x)
        g1y, g2y, _ = state.idnet.part_features(y)
        return ((g1y - g1x.detach()).abs().sum() + (g2y - g2x.detach()).abs().sum()) / len(batch)
    if variant == "triplet":
        _, g2x, _ = state.idnet.part_features(x)
        _, g2y, _ = state.idnet.part_features(y)
        labels = [rec.identity_id for rec in batch]
        triples = mine_triplets(g2x.detach(), labels)
        total = x.new_zeros(())
        for a, p, n in triples:
            total = total + losses.triplet_hard_loss(
                g2y[a], g2x[p].detach(), g2x[n].detach(), state.config.triplet_margin
            )
        return total / max(len(triples), 1)
    raise ConfigError(f"unknown loss variant '{variant}'")


def train_step(state: TrainState, batch) -> dict[str, float]:
    """One optimizer step on the generator; the identity network stays frozen."""
    cfg = state.config
    x = torch.stack([state.input_image(rec) for rec in batch])
    textures = state.generator(x)
    y = _render_batch(state, textures, batch)

    sim = _similarity_loss(state, x, y, batch)
    ref_tex = torch.tensor(state.reference.texture.pixels, dtype=torch.float32)
    ref_mask = torch.tensor(state.reference.mask.astype(np.float32)).unsqueeze(-1)
    tex_hwc = textures.permute(0, 2, 3, 1)
    face = (ref_mask * (tex_hwc - ref_tex)).abs().sum() / len(batch)

    sim_weight = cfg.weights.lambda_reid if cfg.loss_variant in ("reid", "no_pose", "no_pcb") else 1.0
    total = sim_weight * sim + cfg.weights.lambda_face * face

    state.optimizer.zero_grad()
    total.backward()
    state.optimizer.step()
    state.iteration += 1
    return {
        "total": float(total.detach()),
        "similarity": float(sim.detach()),
        "face": float(face.detach()),
    }


def train(
    config: TrainConfig,
    index: DatasetIndex,
    body: BodyModelSpec,
    idnet: IdNet | None = None,
    perceptual=None,
    background_pool: BackgroundPool | None = None,
    checkpoint_dir=None,
    log_file=None,
    resume: bool = False,
) -> TrainState:
    """Run the training loop; checkpoints per epoch plus final, resumable.

    An epoch is ceil(n_records / batch_size) iterations; max_iterations caps the
    total. Deterministic given the config seed (single-threaded torch path).
    """
    torch.set_num_threads(1)
    state = TrainState(config, index, body, idnet, perceptual, background_pool)
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    state_file = ckpt_dir / "train_state.pt" if ckpt_dir is not None else None
    if resume and state_file is not None and state_file.exists():
        _load_train_state(state, state_file)

    iters_per_epoch = max(1, -(-len(index.records) // config.batch_size))
    log = open(log_file, "a") if log_file is not None else None
    try:
        while state.epoch < config.epochs:
            for _ in range(iters_per_epoch):
                if config.max_iterations is not None and state.iteration >= config.max_iterations:
                    break
                batch = sample_batch(index, config, state.rng)
                scalars = train_step(state, batch)
                if log is not None:
                    parts = " ".join(f"{k}={v:.6g}" for k, v in scalars.items())
                    log.write(f"iter={state.iteration} {parts}\n")
            state.epoch += 1
            if ckpt_dir is not None:
                gen_mod.save_checkpoint(
                    state.generator, ckpt_dir / f"checkpoint_epoch_{state.epoch:03d}.npz"
                )
                _save_train_state(state, state_file)
            if config.max_iterations is not None and state.iteration >= config.max_iterations:
                break
        if ckpt_dir is not None:
            gen_mod.save_checkpoint(state.generator, ckpt_dir / "checkpoint_final.npz")
            _save_train_state(state, state_file)
    finally:
        if log is not None:
            log.close()
    return state


def _save_train_state(state: TrainState, path) -> None:
    torch.save(
        {
            "generator": state.generator.state_dict(),
            "optimizer": state.optimizer.state_dict(),
            "rng": state.rng.bit_generator.state,
            "bg_rng": state.background_pool.rng.bit_generator.state,
            "iteration": state.iteration,
            "epoch": state.epoch,
        },
        path,
    )


def _load_train_state(state: TrainState, path) -> None:
    blob = torch.load(path, weights_only=False)
    state.generator.load_state_dict(blob["generator"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.rng.bit_generator.state = blob["rng"]
    state.background_pool.rng.bit_generator.state = blob["bg_rng"]
    state.iteration = blob["iteration"]
    state.epoch = blob["epoch"]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def evaluate(
    generator: TextureGenerator,
    index: DatasetIndex,
    body: BodyModelSpec,
    classifier=None,
    splits: int = 1,
) -> tuple[MetricReport, list[dict]]:
    """Render every record's generated texture and score it against the input.

    SSIM/mask-SSIM per image (mask = render coverage), inception-style score
    over the rendered set. Deterministic.
    """
    if not index.records:
        raise DatasetError("evaluation index is empty")
    cfg = generator.config
    image_dims = (cfg.in_dims[0], cfg.in_dims[1])
    texture_dims = (cfg.out_dims[0], cfg.out_dims[1])
    per_image = []
    rendered, masks = [], []
    gray = ImageTensor(np.full((*image_dims, 3), 0.5))
    for rec in index.records:
        img = dataio.load_image(rec.image_path, image_dims)
        if rec.render_tensor_cache_path is not None and Path(rec.render_tensor_cache_path).exists():
            rt = rendering.load_render_tensor(rec.render_tensor_cache_path)
        else:
            sidecar = dataio.load_pose_sidecar(rec.pose_sidecar_path)
            mesh = dataio.posed_mesh_from_sidecar(body, sidecar)
            rt = rendering.build_render_tensor(mesh, sidecar.camera, image_dims, texture_dims)
        tex = gen_mod.generator_forward(generator, img)
        render = rendering.apply(rt, tex, gray)
        mask = rendering.pose_mask(rt)
        s = metrics.ssim(render, img)
        ms = metrics.mask_ssim(render, img, mask)
        per_image.append(
            {"image": str(rec.image_path), "ssim": s, "mask_ssim": ms}
        )
        rendered.append(render)
        masks.append(mask)
    if classifier is None:
        classifier = lambda img: np.array([0.5, 0.5])  # noqa: E731 - IS degenerates to 1
    is_score = metrics.inception_score(rendered, classifier, splits)
    m_is = metrics.mask_is(rendered, masks, classifier, splits)
    report = MetricReport(
        ssim=float(np.mean([p["ssim"] for p in per_image])),
        mask_ssim=float(np.mean([p["mask_ssim"] for p in per_image])),
        is_score=is_score,
        mask_is=m_is,
        n_images=len(per_image),
    )
    return report, per_image


def save_metric_report(report: MetricReport, per_image, path) -> None:
    """Line-oriented key/value report file."""
    with open(path, "w") as f:
        f.write(f"n_images = {report.n_images}\n")
        f.write(f"ssim = {report.ssim!r}\n")
        f.write(f"mask_ssim = {report.mask_ssim!r}\n")
        f.write(f"is = {report.is_score!r}\n")
        f.write(f"mask_is = {report.mask_is!r}\n")
        for p in per_image:
            f.write(f"image {p['image']} ssim={p['ssim']!r} mask_ssim={p['mask_ssim']!r}\n")


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------


def run_ablation(
    grid: list[str],
    base_config: TrainConfig,
    train_index: DatasetIndex,
    test_index: DatasetIndex,
    body: BodyModelSpec,
    idnet_pcb: IdNet,
    idnet_global: IdNet | None = None,
    perceptual=None,
    no_pose_cache_dir=None,
) -> dict[str, MetricReport]:
    """Train every variant from the same seed and evaluate on the test split.

    no_pose swaps the training render tensors for random-pose ones; no_pcb swaps
    the identity network for the global-pooling variant.
    """
    for v in grid:
        if v not in ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation variant '{v}'")
    results: dict[str, MetricReport] = {}
    for variant in grid:
        config = replace(base_config, loss_variant=variant)
        idx = train_index
        net = idnet_pcb
        if variant == "no_pcb":
            if idnet_global is None:
                raise ConfigError("no_pcb variant requires the global identity network")
            net = idnet_global
        if variant == "no_pose":
            if no_pose_cache_dir is None:
                raise ConfigError("no_pose variant requires no_pose_cache_dir")
            idx = randomize_pose_caches(
                train_index, body, config.image_dims, config.texture_dims,
                no_pose_cache_dir, seed=base_config.seed + 101,
            )
        state = train(config, idx, body, idnet=net, perceptual=perceptual)
        classifier = idnet_mod.identity_classifier(idnet_global or idnet_pcb)
        report, _ = evaluate(state.generator, test_index, body, classifier=classifier)
        results[variant] = report
    return results


def randomize_pose_caches(
    index: DatasetIndex,
    body: BodyModelSpec,
    image_dims,
    texture_dims,
    cache_dir,
    seed: int = 0,
) -> DatasetIndex:
    """Rebuild render tensors from random walking poses (pose-alignment ablation)."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    poses = dataio.walking_pose_source(16, seed=seed)
    rng = np.random.default_rng(seed)
    from retexture.bodymodel import PoseParams, ShapeParams, Translation, pose_mesh

    out = []
    for rec in index.records:
        cache = cache_dir / (Path(rec.image_path).stem + dataio.CACHE_SUFFIX)
        if not cache.exists():
            theta = poses[int(rng.integers(len(poses)))]
            mesh = pose_mesh(body, ShapeParams.zeros(), theta, Translation.zeros())
            camera = dataio.fit_camera(mesh, image_dims)
            rt = rendering.build_render_tensor(mesh, camera, image_dims, texture_dims)
            rendering.save_render_tensor(rt, cache)
        out.append(replace(rec, render_tensor_cache_path=cache))
    return DatasetIndex(out, split=index.split)


def format_ablation_table(results: dict[str, MetricReport]) -> str:
    """Aligned text table, metrics as rows and variants as columns."""
    variants = list(results)
    rows = [
        ("SSIM", "ssim"),
        ("mask-SSIM", "mask_ssim"),
        ("IS", "is_score"),
        ("mask-IS", "mask_is"),
    ]
    width = max(12, max(len(v) for v in variants) + 2)
    lines = ["Metric".ljust(12) + "".join(v.rjust(width) for v in variants)]
    for label, attr in rows:
        vals = "".join(f"{getattr(results[v], attr):{width}.4f}" for v in variants)
        lines.append(label.ljust(12) + vals)
    return "\n".join(lines)


def save_ablation_table(results: dict[str, MetricReport], path) -> None:
    """Machine-readable companion: variant.metric = value lines plus the table."""
    with open(path, "w") as f:
        for v, rep in results.items():
            f.write(f"{v}.ssim = {rep.ssim!r}\n")
            f.write(f"{v}.mask_ssim = {rep.mask_ssim!r}\n")
            f.write(f"{v}.is = {rep.is_score!r}\n")
            f.write(f"{v}.mask_is = {rep.mask_is!r}\n")
        f.write("\n" + format_ablation_table(results) + "\n")
