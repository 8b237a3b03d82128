"""Alternating adversarial training of the copy-paste generator and discriminator.

One *step* is one optimizer update on one fresh batch. The first
``disc_only_steps`` steps update only the discriminator; afterwards steps
alternate generator, discriminator, generator, ...
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import shutil
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import evalkit, imaging, losses, nets, seedpolicy, synthdata
from .errors import ConfigError, NonFiniteLossError
from .groundedfakes import sample_polygon_masks

logger = logging.getLogger(__name__)

VALIDATION_OFFSET = 1_000_000_000


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr_initial: float = 3e-4
    lr_drop_step: int = 30_000
    lr_drop_factor: float = 3.0
    disc_only_steps: int = 1000
    total_steps: int = 300_000
    aux_weight: float = losses.AUX_WEIGHT
    blur_enabled: bool = True
    border_zero_enabled: bool = True
    anti_shortcut_enabled: bool = True
    grounded_fakes_enabled: bool = True
    mask_pred_enabled: bool = True
    generator_kind: str = "direct"
    rng_seed: int = 0
    # everything below is artifact plumbing with documented defaults
    blur_sigma: float = 1.0
    blur_kernel: int = 3
    border_width: int = 1
    non_saturating: bool = False
    entropy_weight: float = seedpolicy.ENTROPY_WEIGHT
    critic_weight: float = seedpolicy.CRITIC_WEIGHT
    structured_dropout: bool = True
    levels: int = 4
    base_channels: int = 32
    encoder_dim: int = 512
    convs_per_level: int = 1
    data_seed: int = 0
    train_size: int = 10_000
    eval_size: int = 512
    eval_interval: int = 1000
    checkpoint_interval: int = 5000
    sample_interval: int = 0
    log_scores: bool = False
    device: str = "cpu"

    def __post_init__(self):
        if self.lr_drop_step >= self.total_steps:
            raise ConfigError("lr_drop_step must be smaller than total_steps")
        if self.disc_only_steps < 0:
            raise ConfigError("disc_only_steps must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (irrelevant images need a derangement)")
        if self.generator_kind not in ("direct", "instance_colouring"):
            raise ConfigError(f"unknown generator_kind {self.generator_kind!r}")

    def unet_config(self, image_size: int) -> nets.UNetConfig:
        return nets.UNetConfig(
            input_size=image_size, levels=self.levels, base_channels=self.base_channels,
            encoder_dim=self.encoder_dim, convs_per_level=self.convs_per_level,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepRecord:
    step: int
    kind: str  # "d" or "g"
    losses: dict
    lr: float
    wallclock: float
    odp_eval: float | None = None
    scores: dict | None = None
    pg: dict | None = None

    def to_json(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


@dataclass
class Batch:
    sources: torch.Tensor
    destinations: torch.Tensor
    irrelevants: torch.Tensor
    reals: torch.Tensor


def _derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    while True:
        perm = rng.permutation(n)
        if not (perm == np.arange(n)).any():
            return perm


def build_batch(dataset: np.ndarray, batch_size: int, rng: np.random.Generator) -> Batch:
    """Sources, destinations and reals drawn independently without replacement.

    Irrelevant images are the sources under a within-batch derangement, so
    no source is paired with itself.
    """
    n = len(dataset)
    if n == 0:
        raise ConfigError("dataset is empty")
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n}")
    src = rng.choice(n, batch_size, replace=False)
    dst = rng.choice(n, batch_size, replace=False)
    real = rng.choice(n, batch_size, replace=False)
    irr = src[_derangement(rng, batch_size)]
    return Batch(*(imaging.to_nchw(dataset[idx]) for idx in (src, dst, irr, real)))


@dataclass
class TrainState:
    config: TrainConfig
    image_size: int
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    g_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0


def init_state(config: TrainConfig, image_size: int) -> TrainState:
    torch.manual_seed(config.rng_seed)
    ucfg = config.unet_config(image_size)
    gen = nets.build_generator(config.generator_kind, ucfg).to(config.device)
    disc = nets.Discriminator(ucfg).to(config.device)
    g_opt = torch.optim.Adam(gen.parameters(), lr=config.lr_initial)
    d_opt = torch.optim.Adam(disc.parameters(), lr=config.lr_initial)
    rng = np.random.default_rng([config.rng_seed, 1])
    return TrainState(config, image_size, gen, disc, g_opt, d_opt, rng)


def learning_rate(config: TrainConfig, step: int) -> float:
    if step >= config.lr_drop_step:
        return config.lr_initial / config.lr_drop_factor
    return config.lr_initial


def step_kind(config: TrainConfig, step: int) -> str:
    if step < config.disc_only_steps:
        return "d"
    return "g" if (step - config.disc_only_steps) % 2 == 0 else "d"


@dataclass
class GenOutput:
    mask: torch.Tensor  # (N, 1, H, W), border-zeroed when enabled
    decision: seedpolicy.SeedDecision | None = None


def generate_masks(state: TrainState, sources: torch.Tensor, mode: str = "sample") -> GenOutput:
    """Copy-masks for a batch; ``mode`` picks seeds by sampling (training) or argmax (evaluation)."""
    cfg = state.config
    out = state.generator(sources)
    decision = None
    if isinstance(out, nets.InstColourOutput):
        policy = seedpolicy.seediness_softmax(out.seediness_logits)
        if mode == "sample" and cfg.structured_dropout:
            policy = seedpolicy.structured_dropout(policy, state.rng)
        decision = seedpolicy.pick_seed(policy, mode, state.rng, value=out.value)
        mask = nets.induced_mask(out.features, decision.seed)
    else:
        mask = out
    if cfg.border_zero_enabled:
        mask = imaging.border_zero_batch(mask, cfg.border_width)
    return GenOutput(mask=mask, decision=decision)


def _disc_view(state: TrainState, images: torch.Tensor) -> torch.Tensor:
    cfg = state.config
    if cfg.blur_enabled:
        return imaging.gaussian_blur_batch(images, cfg.blur_sigma, cfg.blur_kernel)
    return images


def _run_disc(state: TrainState, branches: dict[str, torch.Tensor]) -> tuple[dict, dict]:
    """One discriminator pass over all branches concatenated; returns per-branch scores and masks."""
    names = list(branches)
    sizes = [len(branches[k]) for k in names]
    out = state.discriminator(_disc_view(state, torch.cat([branches[k] for k in names])))
    scores = dict(zip(names, out.realness.split(sizes)))
    masks = dict(zip(names, out.mask.split(sizes)))
    return scores, masks


def _check_finite(state: TrainState, bundle: losses.LossBundle, batch: Batch, extra: dict, run_dir: Path | None):
    values = bundle.as_dict()
    if all(np.isfinite(v) for v in values.values()):
        return
    dump = None
    if run_dir is not None:
        dump = Path(run_dir) / "diagnostics" / f"step_{state.step}.npz"
        dump.parent.mkdir(parents=True, exist_ok=True)
        np.savez(
            dump, sources=batch.sources.cpu().numpy(), destinations=batch.destinations.cpu().numpy(),
            irrelevants=batch.irrelevants.cpu().numpy(), reals=batch.reals.cpu().numpy(),
            **{k: v.detach().cpu().numpy() for k, v in extra.items()},
        )
        (dump.with_suffix(".json")).write_text(json.dumps(values, indent=2))
    raise NonFiniteLossError(f"non-finite loss at step {state.step}: {values}", dump)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def train_step(state: TrainState, batch: Batch, run_dir: Path | None = None) -> StepRecord:
    """Apply one discriminator or generator update (per the schedule) and advance ``state.step``."""
    cfg = state.config
    t0 = time.perf_counter()
    lr = learning_rate(cfg, state.step)
    kind = step_kind(cfg, state.step)
    if batch.sources.device.type != cfg.device:
        batch = Batch(*(t.to(cfg.device) for t in dataclasses.astuple(batch)))
    h, w = batch.sources.shape[-2:]
    pg_record = None

    if kind == "d":
        with torch.no_grad():
            gen = generate_masks(state, batch.sources)
        mask = gen.mask
        branches = {"real": batch.reals, "fake": imaging.composite_batch(batch.sources, batch.destinations, mask)}
        gf_mask = None
        if cfg.grounded_fakes_enabled:
            gf_mask = torch.as_tensor(sample_polygon_masks(state.rng, len(mask), h, w), dtype=mask.dtype,
                                      device=mask.device)[:, None]
            branches["grounded_fake"] = imaging.composite_batch(batch.sources, batch.destinations, gf_mask)
        if cfg.anti_shortcut_enabled and cfg.mask_pred_enabled:
            branches["anti_shortcut"] = imaging.composite_batch(batch.irrelevants, batch.destinations, mask)
        scores, mask_preds = _run_disc(state, branches)
        # the anti-shortcut image only feeds the auxiliary mask loss on this side
        d_scores = {k: v for k, v in scores.items() if k != "anti_shortcut"}
        bundle = losses.assemble_losses(
            d_scores, mask_preds if cfg.mask_pred_enabled else None, gen_mask=mask,
            grounded_mask=gf_mask, aux_weight=cfg.aux_weight, non_saturating=cfg.non_saturating,
        )
        _check_finite(state, bundle, batch, {"mask": mask}, run_dir)
        _set_lr(state.d_opt, lr)
        state.d_opt.zero_grad(set_to_none=True)
        bundle.d_total.backward()
        state.d_opt.step()
    else:
        disc = state.discriminator
        disc.requires_grad_(False)
        try:
            gen = generate_masks(state, batch.sources)
            mask = gen.mask
            branches = {"fake": imaging.composite_batch(batch.sources, batch.destinations, mask)}
            if cfg.anti_shortcut_enabled:
                branches["anti_shortcut"] = imaging.composite_batch(batch.irrelevants, batch.destinations, mask)
            scores, _ = _run_disc(state, branches)
            bundle = losses.assemble_losses(scores, None, aux_weight=cfg.aux_weight, non_saturating=cfg.non_saturating)
            objective = bundle.g_total
            if gen.decision is not None:
                per_sample = _per_sample_g(scores, cfg.non_saturating)
                terms = seedpolicy.policy_grad_terms(-per_sample.detach(), gen.decision, cfg.entropy_weight)
                objective = objective + terms.total(cfg.critic_weight)
                pg_record = {
                    "reward": float(terms.reward.mean()), "policy_term": float(terms.policy_term.detach()),
                    "entropy_term": float(terms.entropy_term.detach()),
                    "critic_term": float(terms.critic_term.detach()),
                }
            _check_finite(state, bundle, batch, {"mask": mask}, run_dir)
            _set_lr(state.g_opt, lr)
            state.g_opt.zero_grad(set_to_none=True)
            objective.backward()
            state.g_opt.step()
        finally:
            disc.requires_grad_(True)

    record = StepRecord(
        step=state.step, kind=kind, losses=bundle.as_dict(), lr=lr, wallclock=time.perf_counter() - t0,
        pg=pg_record,
    )
    if cfg.log_scores:
        record.scores = {k: v.detach().double().tolist() for k, v in scores.items()}
    state.step += 1
    return record


def _per_sample_g(scores: dict, non_saturating: bool) -> torch.Tensor:
    fake = scores["fake"]
    g = losses.bce(fake, 1.0) if non_saturating else -losses.bce(fake, 0.0)
    if "anti_shortcut" in scores:
        g = g + losses.bce(scores["anti_shortcut"], 0.0)
    return g


# -- evaluation ---------------------------------------------------------------

def predict_masks(state: TrainState, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Test-time copy-masks (argmax seed, no dropout) for an (N, H, W, 3) array."""
    gen = state.generator
    was_training = gen.training
    gen.eval()
    out = []
    try:
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                x = imaging.to_nchw(images[i:i + batch_size]).to(state.config.device)
                out.append(generate_masks(state, x, mode="argmax").mask[:, 0].cpu().numpy())
    finally:
        gen.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[1:3])


def evaluate(state: TrainState, scenes: list[synthdata.Scene]) -> evalkit.EvalSummary:
    images = np.stack([s.image for s in scenes]).astype(np.float32)
    preds = predict_masks(state, images)
    return evalkit.odp([evalkit.EvalCase(p, s.object_masks) for p, s in zip(preds, scenes)])


# -- checkpoints ----------------------------------------------------------------

def params_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(state: TrainState, directory: Path, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "generator": state.generator.state_dict(),
            "discriminator": state.discriminator.state_dict(),
            "g_opt": state.g_opt.state_dict(),
            "d_opt": state.d_opt.state_dict(),
        },
        directory / "params.pt",
    )
    meta = {
        "step": state.step,
        "image_size": state.image_size,
        "unet": state.config.unet_config(state.image_size).to_dict(),
        "train": state.config.to_dict(),
        "rng_state": state.rng.bit_generator.state,
    }
    if extra:
        meta.update(extra)
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    return directory


def load_checkpoint(directory: Path, config: TrainConfig | None = None) -> tuple[TrainState, dict]:
    directory = Path(directory)
    if not (directory / "params.pt").exists():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    meta = json.loads((directory / "meta.json").read_text())
    config = config or TrainConfig.from_dict(meta["train"])
    state = init_state(config, meta["image_size"])
    blob = torch.load(directory / "params.pt", weights_only=True, map_location=config.device)
    state.generator.load_state_dict(blob["generator"])
    state.discriminator.load_state_dict(blob["discriminator"])
    state.g_opt.load_state_dict(blob["g_opt"])
    state.d_opt.load_state_dict(blob["d_opt"])
    state.rng.bit_generator.state = meta["rng_state"]
    state.step = meta["step"]
    return state, meta


def latest_checkpoint(run_dir: Path) -> Path | None:
    ckpts = sorted((Path(run_dir) / "checkpoints").glob("step_*"), key=lambda p: int(p.name.split("_")[1]))
    ckpts = [c for c in ckpts if (c / "params.pt").exists()]
    return ckpts[-1] if ckpts else None


# -- experiments ------------------------------------------------------------------

def make_splits(config: TrainConfig, data: synthdata.DatasetConfig) -> tuple[np.ndarray, list[synthdata.Scene]]:
    train = synthdata.sample_scenes(data, config.data_seed, config.train_size)
    val = synthdata.sample_scenes(data, config.data_seed, config.eval_size, start=VALIDATION_OFFSET)
    return np.stack([s.image for s in train]).astype(np.float32), val


def save_samples(state: TrainState, scenes: list[synthdata.Scene], directory: Path, n: int = 8) -> None:
    """Source / copy-mask / composite (and seediness) PNGs for the first ``n`` validation scenes."""
    directory.mkdir(parents=True, exist_ok=True)
    images = np.stack([s.image for s in scenes[:n]]).astype(np.float32)
    x = imaging.to_nchw(images).to(state.config.device)
    gen = state.generator
    gen.eval()
    with torch.no_grad():
        masks = generate_masks(state, x, mode="argmax").mask.cpu()
        seediness = None
        if state.config.generator_kind == "instance_colouring":
            seediness = seedpolicy.seediness_softmax(gen(x).seediness_logits).cpu().numpy()
    gen.train()
    dest = np.roll(images, 1, axis=0)
    comps = imaging.to_nhwc(imaging.composite_batch(x.cpu(), imaging.to_nchw(dest), masks))
    for i in range(len(images)):
        imaging.save_image(directory / f"{i}_source.png", images[i])
        imaging.save_mask(directory / f"{i}_mask.png", masks[i, 0].numpy())
        imaging.save_image(directory / f"{i}_composite.png", np.clip(comps[i], 0, 1))
        if seediness is not None:
            s = seediness[i]
            imaging.save_mask(directory / f"{i}_seediness.png", s / max(s.max(), 1e-12))


def _truncate_records(path: Path, before_step: int) -> None:
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines() if line and json.loads(line)["step"] < before_step]
    path.write_text("".join(line + "\n" for line in keep))


def run_experiment(
    config: TrainConfig,
    data: synthdata.DatasetConfig,
    run_dir: str | Path,
    resume: bool = True,
    stop_after: int | None = None,
    progress: Callable[[StepRecord], None] | None = None,
    stop_when: Callable[[StepRecord], bool] | None = None,
) -> Path:
    """Train for ``config.total_steps`` steps, evaluating ODP every ``eval_interval`` steps.

    Writes ``config.json``, ``records.jsonl``, ``checkpoints/step_N``,
    ``summary.json`` and optional ``samples/step_N``. With ``resume`` the
    latest checkpoint in ``run_dir`` is restored first. ``stop_after``
    halts early (without a summary) after that many steps, to simulate an
    interrupted run. ``stop_when`` is called after every step; returning
    True ends training there and writes the summary as if it had finished.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps({"train": config.to_dict(), "data": dataclasses.asdict(data)}, indent=2)
    )
    train_images, val_scenes = make_splits(config, data)
    records_path = run_dir / "records.jsonl"
    ckpt = latest_checkpoint(run_dir) if resume else None
    if ckpt is not None:
        state, meta = load_checkpoint(ckpt, config)
        history = meta.get("odp_history", [])
        _truncate_records(records_path, state.step)
        logger.info("resumed %s at step %d", run_dir, state.step)
    else:
        if not resume and (run_dir / "checkpoints").exists():
            shutil.rmtree(run_dir / "checkpoints")
        state = init_state(config, data.image_size)
        history = []
        records_path.write_text("")

    with open(records_path, "a") as fh:
        while state.step < config.total_steps:
            if stop_after is not None and state.step >= stop_after:
                return run_dir
            batch = build_batch(train_images, config.batch_size, state.rng)
            record = train_step(state, batch, run_dir)
            done = state.step
            if config.eval_interval and (done % config.eval_interval == 0 or done == config.total_steps):
                summary = evaluate(state, val_scenes)
                record.odp_eval = summary.odp
                history.append([done, summary.odp])
            fh.write(json.dumps(record.to_json()) + "\n")
            fh.flush()
            if progress is not None:
                progress(record)
            if config.sample_interval and done % config.sample_interval == 0:
                save_samples(state, val_scenes, run_dir / "samples" / f"step_{done}")
            if config.checkpoint_interval and done % config.checkpoint_interval == 0:
                save_checkpoint(state, run_dir / "checkpoints" / f"step_{done}", {"odp_history": history})
            if stop_when is not None and stop_when(record):
                break

    if not history:
        history.append([state.step, evaluate(state, val_scenes).odp])
    summary = summarize(history)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    if latest_checkpoint(run_dir) is None or latest_checkpoint(run_dir).name != f"step_{state.step}":
        save_checkpoint(state, run_dir / "checkpoints" / f"step_{state.step}", {"odp_history": history})
    return run_dir


def summarize(history: list) -> dict:
    """Early-stopping and stability summary from ``[[step, odp], ...]``."""
    steps = [s for s, _ in history]
    values = [v for _, v in history]
    best = int(np.argmax(values))
    return {
        "max_odp": values[best],
        "best_step": steps[best],
        "final_odp": values[-1],
        "final_step": steps[-1],
        "stable": evalkit.is_stable(values[-1], values[best]),
        "odp_history": history,
    }
