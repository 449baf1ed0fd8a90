"""Hierarchy-aware denoiser training.

Each step draws a uniform timestep per sample, asks the prompt schedule which
prefix of the hierarchy is active at that step, embeds it (with classifier-free
dropout), forward-noises the encoded image, and regresses the injected noise
with mean squared error under decoupled-weight-decay adaptive moments.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint, conditioning, schedule as sched, tensor as T
from .codec import IdentityCodec
from .conditioning import TokenVocabulary, embed_prompt
from .dataset import Corpus, GlyphSample
from .layers import Embedding, Module
from .optim import AdamW
from .prompts import level_for, sample_training_timestep
from .tensor import Tensor
from .unet import PCUNet, UNetConfig


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    batch_size: int = 16
    learning_rate: float = 3e-4  # from-scratch rate; fine-tuning-scale 1e-6 is far too slow here
    warmup_steps: int = 150  # linear LR ramp
    weight_decay: float = 0.01
    cfg_dropout_p: float = 0.1
    pose_prob: float = 0.5  # fraction of batches that see the pose condition
    seed: int = 0
    non_hiera: bool = False
    non_pose: bool = False
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    interval_fraction: float = 0.15
    embedding_dim: int = 64
    stratified_timesteps: bool = False
    heatmap_sigma: float = 2.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class DiffusionModel(Module):
    """Denoiser plus the jointly trained prompt-embedding table."""

    def __init__(self, vocab: TokenVocabulary, unet_config: UNetConfig, *,
                 rng: np.random.Generator):
        self.vocab = vocab
        self.embedding = Embedding(len(vocab), vocab.embedding_dim, rng=rng)
        self.unet = PCUNet(unet_config, rng=rng)

    def embed_tokens(self, tokens) -> Tensor:
        return embed_prompt(tokens, self.vocab, self.embedding.table)

    def null_cond(self) -> Tensor:
        return conditioning.null_embedding(self.vocab, self.embedding.table)

    def save(self, path, extra: dict | None = None) -> None:
        cfg = {
            "unet": self.unet.config.to_dict(),
            "vocab": {"tokens": list(self.vocab.tokens),
                      "embedding_dim": self.vocab.embedding_dim},
        }
        if extra:
            cfg.update(extra)
        checkpoint.save(path, self.state_dict(), cfg)

    @classmethod
    def load(cls, path) -> tuple["DiffusionModel", dict]:
        params, cfg = checkpoint.load(path)
        vocab = TokenVocabulary(
            tokens=tuple(cfg["vocab"]["tokens"]),
            embedding_dim=int(cfg["vocab"]["embedding_dim"]),
        )
        model = cls(vocab, UNetConfig.from_dict(cfg["unet"]), rng=np.random.default_rng(0))
        model.load_state_dict(params)
        return model, cfg


def sample_pose_heatmaps(samples: list[GlyphSample], sigma: float,
                         downsample: int = 1) -> Tensor:
    maps = [
        conditioning.pose_heatmaps(
            s.keypoints, s.image.shape[:2], sigma, downsample
        )
        for s in samples
    ]
    return Tensor(np.stack(maps))


def _batch_images(samples: list[GlyphSample]) -> np.ndarray:
    return np.stack([s.image.transpose(2, 0, 1) for s in samples])


def train_step(samples: list[GlyphSample], model: DiffusionModel, codec, s,
               config: TrainConfig, rng: np.random.Generator,
               hierarchy_of=None) -> tuple[float, dict]:
    """One optimizer update; returns (loss, level -> mean sample loss)."""
    b = len(samples)
    with T.no_grad():
        x0 = codec.encode(Tensor(_batch_images(samples))).data

    ts, conds, levels = [], [], []
    null = model.null_cond()
    for sample in samples:
        if hierarchy_of is not None:
            hierarchy = hierarchy_of(sample)
        else:
            hierarchy = sample.spec.hierarchy(config.interval_fraction)
        t = sample_training_timestep(
            rng, s.T, hierarchy=hierarchy, stratified=config.stratified_timesteps
        )
        assignment = level_for(t, s.T, hierarchy, non_hiera=config.non_hiera)
        cond = model.embed_tokens(assignment.active_tokens)
        cond = conditioning.cfg_dropout(cond, null, config.cfg_dropout_p, rng)
        ts.append(t)
        levels.append(assignment.level)
        conds.append(T.reshape(cond, (1, model.vocab.embedding_dim)))
    cond_batch = T.concat(conds, axis=0)

    eps = rng.standard_normal(x0.shape).astype(np.float32)
    ab = s.alpha_bar[np.asarray(ts) - 1].astype(np.float32)
    xt = (
        np.sqrt(ab)[:, None, None, None] * x0
        + np.sqrt(1.0 - ab)[:, None, None, None] * eps
    )

    pose = None
    if not config.non_pose and rng.random() < config.pose_prob:
        pose = sample_pose_heatmaps(
            samples, config.heatmap_sigma, getattr(codec, "downsample", 1)
        )

    model.zero_grad()
    eps_hat = model.unet(Tensor(xt), np.asarray(ts), cond_batch, pose)
    resid = T.sub(eps_hat, Tensor(eps))
    loss = T.mean_(T.mul(resid, resid))
    loss_val = loss.item()
    if not np.isfinite(loss_val):
        raise RuntimeError(
            f"non-finite training loss {loss_val} at t={ts}, "
            f"levels={levels}; check learning rate and schedule"
        )
    T.backward(loss)

    per_sample = ((eps_hat.data - eps) ** 2).mean(axis=(1, 2, 3), dtype=np.float64)
    by_level: dict[int, list] = {}
    for lvl, v in zip(levels, per_sample):
        by_level.setdefault(lvl, []).append(float(v))
    return loss_val, {lvl: float(np.mean(v)) for lvl, v in sorted(by_level.items())}


def heldout_loss(samples: list[GlyphSample], model: DiffusionModel, codec, s,
                 config: TrainConfig, *, eval_seed: int = 10_000) -> float:
    """Deterministic L_DM on a held-out split (fixed noise, fixed timesteps)."""
    rng = np.random.default_rng(eval_seed)
    total, count = 0.0, 0
    bs = config.batch_size
    for start in range(0, len(samples), bs):
        chunk = samples[start : start + bs]
        with T.no_grad():
            x0 = codec.encode(Tensor(_batch_images(chunk))).data
            ts, conds = [], []
            for sample in chunk:
                hierarchy = sample.spec.hierarchy(config.interval_fraction)
                t = sample_training_timestep(rng, s.T)
                assignment = level_for(t, s.T, hierarchy, non_hiera=config.non_hiera)
                ts.append(t)
                conds.append(
                    T.reshape(
                        model.embed_tokens(assignment.active_tokens),
                        (1, model.vocab.embedding_dim),
                    )
                )
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            ab = s.alpha_bar[np.asarray(ts) - 1].astype(np.float32)
            xt = (
                np.sqrt(ab)[:, None, None, None] * x0
                + np.sqrt(1.0 - ab)[:, None, None, None] * eps
            )
            pose = None
            if not config.non_pose:
                pose = sample_pose_heatmaps(
                    chunk, config.heatmap_sigma, getattr(codec, "downsample", 1)
                )
            eps_hat = model.unet(Tensor(xt), np.asarray(ts), T.concat(conds, axis=0), pose)
        total += float(((eps_hat.data - eps) ** 2).sum(dtype=np.float64))
        count += eps.size
    return total / count


def fit(config: TrainConfig, manifest_path, out_dir, *, codec=None,
        unet_config: UNetConfig | None = None, log_every: int = 10,
        val_every_steps: int = 100, quiet: bool = False):
    """Train from scratch; writes checkpoints and a JSONL log, returns the model."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = Corpus(manifest_path)
    codec = codec or IdentityCodec()
    s = sched.build_linear(config.timesteps, config.beta_start, config.beta_end)
    vocab = TokenVocabulary(
        tokens=corpus.vocab.tokens, embedding_dim=config.embedding_dim
    )
    ucfg = unet_config or UNetConfig(pose_enabled=not config.non_pose)
    if config.non_pose and ucfg.pose_enabled:
        ucfg = UNetConfig.from_dict({**ucfg.to_dict(), "pose_enabled": False})
    rng = np.random.default_rng(config.seed)
    model = DiffusionModel(vocab, ucfg, rng=rng)
    opt = AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )

    train_items = corpus.items("train")
    val_samples = [corpus.load(it) for it in corpus.items("val")]
    log_path = out / "train_log.jsonl"
    ckpt_path = out / "model.ckpt"
    step = 0
    t_start = time.time()
    with open(log_path, "w") as log:
        def emit(rec):
            log.write(json.dumps(rec) + "\n")
            log.flush()

        emit({"event": "config", "train": config.to_dict(), "unet": ucfg.to_dict(),
              "n_train": len(train_items), "n_val": len(val_samples)})
        for epoch in range(config.epochs):
            order = rng.permutation(len(train_items))
            n_steps = len(train_items) // config.batch_size
            for k in range(n_steps):
                idx = order[k * config.batch_size : (k + 1) * config.batch_size]
                batch = [corpus.load(train_items[i]) for i in idx]
                loss, by_level = train_step(batch, model, codec, s, config, rng)
                if config.warmup_steps > 0:
                    opt.lr = config.learning_rate * min(1.0, (step + 1) / config.warmup_steps)
                opt.step()
                step += 1
                if step % log_every == 0 or k == n_steps - 1:
                    rec = {"event": "step", "step": step, "epoch": epoch,
                           "loss": loss, "level_losses": by_level,
                           "elapsed_s": round(time.time() - t_start, 1)}
                    emit(rec)
                    if not quiet:
                        print(f"step {step} epoch {epoch} loss {loss:.4f}")
                if step % val_every_steps == 0 and val_samples:
                    vl = heldout_loss(val_samples, model, codec, s, config)
                    emit({"event": "val", "step": step, "val_loss": vl})
                    if not quiet:
                        print(f"step {step} val_loss {vl:.4f}")
            model.save(
                ckpt_path,
                {"train_config": config.to_dict(), "epoch": epoch, "step": step,
                 "schedule": {"T": config.timesteps, "beta_start": config.beta_start,
                              "beta_end": config.beta_end}},
            )
        if val_samples:
            vl = heldout_loss(val_samples, model, codec, s, config)
            emit({"event": "val", "step": step, "val_loss": vl, "final": True})
    return model, s, log_path
