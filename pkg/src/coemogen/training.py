"""Training: semantic loss, the per-sample step, the loop, checkpoints and resume."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import torch
import torch.nn.functional as F

from .corpus.curation import oversample
from .corpus.records import CorpusManifest, CorpusRecord, FileImageLoader
from .diffusion import ldm_loss
from .encoders import TextEncoding, load_image_tensor
from .errors import CompatibilityError, ConfigurationError, DataError, LossError, TrainingError
from .model import CoEmoGenModel, ModelConfig
from .seeding import derive_seed
from .taxonomy import Emotion

logger = logging.getLogger(__name__)

SEM_LOSS_KINDS = ("cosine", "mae", "mse", "kl")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 1e-2
    batch_size: int = 1
    iterations: int = 2000
    sem_loss_weight: float = 1.0
    sem_loss_kind: str = "cosine"
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.sem_loss_kind not in SEM_LOSS_KINDS:
            raise ConfigurationError(f"sem_loss_kind must be one of {SEM_LOSS_KINDS}")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.iterations < 0 or self.sem_loss_weight < 0:
            raise ConfigurationError("learning_rate and batch_size must be positive, iterations and weights >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def semantic_loss(condition, caption, kind: str = "cosine") -> torch.Tensor:
    """Distance between pooled condition and caption embeddings; cosine gives ``1 - cos`` in [0, 2].

    ``condition`` and ``caption`` may be tensors ``(d,)``/``(B, d)`` or
    objects exposing ``pooled``. ``kl`` compares softmax-normalised vectors,
    KL(caption || condition).
    """
    a = getattr(condition, "pooled", condition)
    b = getattr(caption, "pooled", caption).to(a.dtype)
    if a.dim() == 1:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    if kind == "cosine":
        na, nb = a.norm(dim=-1), b.norm(dim=-1)
        if (na == 0).any() or (nb == 0).any():
            raise LossError("semantic loss undefined for a zero-norm vector")
        return (1 - (a * b).sum(-1) / (na * nb)).mean()
    if kind == "mae":
        return (a - b).abs().mean()
    if kind == "mse":
        return ((a - b) ** 2).mean()
    if kind == "kl":
        return F.kl_div(F.log_softmax(a, dim=-1), F.log_softmax(b, dim=-1), log_target=True, reduction="batchmean")
    raise ConfigurationError(f"unknown semantic loss kind {kind!r}")


class TrainingData:
    """Frozen-encoder features for a manifest, computed once."""

    def __init__(self, manifest: CorpusManifest, model: CoEmoGenModel, root: str | os.PathLike | None = None,
                 loader=None):
        loader = loader or FileImageLoader(root)
        self.records: dict[str, CorpusRecord] = {}
        self.latents: dict[str, torch.Tensor] = {}
        self.tokens: dict[str, torch.Tensor] = {}
        self.captions: dict[str, torch.Tensor] = {}
        size = model.config.image_size
        with torch.no_grad():
            for r in manifest.records:
                if r.image_ref in self.records:
                    continue
                if not r.caption:
                    raise DataError(f"record {r.image_ref} has no caption; curate the corpus first")
                image = load_image_tensor(loader(r.image_ref), size)
                self.records[r.image_ref] = r
                self.latents[r.image_ref] = model.latent_encoder.encode(image.unsqueeze(0))[0]
                self.tokens[r.image_ref] = model.image_encoder.tokens(image)[0]
            refs = list(self.records)
            for i in range(0, len(refs), 64):
                chunk = refs[i:i + 64]
                pooled = model.text_encoder.encode_text([self.records[k].caption for k in chunk]).pooled
                for k, p in zip(chunk, pooled):
                    self.captions[k] = p.clone()

    def batch(self, records: list[CorpusRecord]):
        refs = [r.image_ref for r in records]
        return (torch.stack([self.latents[k] for k in refs]), torch.stack([self.tokens[k] for k in refs]),
                torch.stack([self.captions[k] for k in refs]))


class Trainer:
    """Owns the optimizer and the bookkeeping needed for bit-exact resume."""

    def __init__(self, model: CoEmoGenModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.params = model.all_trainable_parameters()
        self.names = {id(p): f"p{i}" for i, p in enumerate(self.params)}
        self.optimizer = torch.optim.AdamW(
            self.params, lr=config.learning_rate, betas=(config.adam_beta1, config.adam_beta2), weight_decay=0.0
        )
        # matrices that have seen a nonzero gradient; decay skips the rest so zero-init B stays exact
        self.activated: set[str] = set()
        self.iteration = 0

    def step(self, records: list[CorpusRecord], data: TrainingData) -> dict:
        config, model = self.config, self.model
        if not records:
            raise DataError("empty batch")
        for r in records:
            if not r.caption:
                raise DataError(f"record {r.image_ref} has no caption")
        labels = {r.label for r in records}
        if len(labels) != 1:
            raise DataError(f"a batch must hold one emotion, got {sorted(l.label for l in labels)}")
        emotion = labels.pop()
        z0, tokens, caption = data.batch(records)
        z0 = z0.to(model.vpe.w_q.dtype)
        g = torch.Generator().manual_seed(derive_seed(config.seed, "step", self.iteration))
        t = torch.randint(0, model.schedule.T, (len(records),), generator=g)
        noise = torch.randn(z0.shape, generator=g, dtype=z0.dtype)

        self.optimizer.zero_grad(set_to_none=True)
        with model.denoiser.routed(emotion):
            cond = model.condition([emotion] * len(records), tokens)
            l_ldm = ldm_loss(z0, model.context_of(cond.condition), t, noise, model.denoiser, model.schedule, emotion)
            if config.sem_loss_weight:
                l_sem = semantic_loss(cond.condition, caption, config.sem_loss_kind)
                total = l_ldm + config.sem_loss_weight * l_sem
            else:
                l_sem = torch.zeros((), dtype=l_ldm.dtype)
                total = l_ldm
            if not torch.isfinite(total):
                raise TrainingError(
                    f"non-finite loss at iteration {self.iteration} ({emotion.label}): "
                    f"l_ldm={l_ldm.item()}, l_sem={l_sem.item()}"
                )
            total.backward()
            grads = [p.grad for p in self.params if p.grad is not None]
            grad_norm = torch.sqrt(sum((gr.double() ** 2).sum() for gr in grads)).item() if grads else 0.0
            self._decay()
            self.optimizer.step()
        self.iteration += 1
        return {
            "iteration": self.iteration, "l_ldm": l_ldm.item(), "l_sem": l_sem.item(),
            "total": total.item(), "grad_norm": grad_norm, "emotion": emotion.label,
        }

    @torch.no_grad()
    def _decay(self) -> None:
        wd, lr = self.config.weight_decay, self.config.learning_rate
        for p in self.params:
            if p.grad is None or p.dim() < 2:
                continue
            name = self.names[id(p)]
            if name not in self.activated:
                if not bool((p.grad != 0).any()):
                    continue
                self.activated.add(name)
            if wd:
                p.mul_(1 - lr * wd)

    # -- state -------------------------------------------------------------
    def state_dict(self) -> dict:
        return {"optimizer": self.optimizer.state_dict(), "activated": sorted(self.activated),
                "iteration": self.iteration}

    def load_state_dict(self, state: dict) -> None:
        self.optimizer.load_state_dict(state["optimizer"])
        self.activated = set(state["activated"])
        self.iteration = int(state["iteration"])


def train_step(sample: CorpusRecord, model: CoEmoGenModel, trainer: Trainer, data: TrainingData) -> dict:
    return trainer.step([sample], data)


def epoch_sequence(manifest: CorpusManifest, seed: int, epoch: int) -> list[CorpusRecord]:
    return oversample(manifest, derive_seed(seed, "epoch", epoch))


def batches_for(manifest: CorpusManifest, config: TrainConfig, start: int, stop: int) -> Iterable[tuple[int, list]]:
    """Yield ``(iteration, records)`` for iterations in ``[start, stop)``; pure in the iteration index."""
    length = len(epoch_sequence(manifest, config.seed, 0))
    cache: dict[int, list[CorpusRecord]] = {}
    b = config.batch_size
    for it in range(start, stop):
        out = []
        for k in range(it * b, (it + 1) * b):
            epoch, pos = divmod(k, length)
            if epoch not in cache:
                cache = {epoch: epoch_sequence(manifest, config.seed, epoch)}
            out.append(cache[epoch][pos])
        yield it, out


# -- checkpoints ----------------------------------------------------------------

@dataclass
class Checkpoint:
    path: Path
    model_config: ModelConfig
    train_config: TrainConfig
    iteration: int
    frozen: dict[str, str]
    manifest_hash: str


def save_checkpoint(path: str | os.PathLike, model: CoEmoGenModel, trainer: Trainer | None,
                    train_config: TrainConfig, manifest_hash: str = "") -> Checkpoint:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.trainable_state()
    for name, tensors in state.items():
        torch.save(tensors, path / f"{name}.pt")
    if trainer is not None:
        torch.save(trainer.state_dict(), path / "optimizer.pt")
    if model.clusters:
        from .inference import clusters_to_state

        torch.save(clusters_to_state(model.clusters), path / "clusters.pt")
    iteration = trainer.iteration if trainer is not None else 0
    frozen = model.frozen_hashes()
    meta = {
        "model": model.config.to_dict(), "train": train_config.to_dict(), "iteration": iteration,
        "rng": {"seed": train_config.seed, "stream": "per-iteration sha256(seed, 'step', iteration)"},
        "frozen": frozen, "manifest_hash": manifest_hash,
    }
    (path / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return Checkpoint(path, model.config, train_config, iteration, frozen, manifest_hash)


def read_checkpoint_meta(path: str | os.PathLike) -> dict:
    p = Path(path) / "config.json"
    if not p.exists():
        raise CompatibilityError(f"{path} is not a checkpoint (no config.json)")
    return json.loads(p.read_text(encoding="utf-8"))


def load_checkpoint(path: str | os.PathLike, model: CoEmoGenModel, trainer: Trainer | None = None) -> dict:
    """Restore trainable state (and optimizer state) after verifying frozen hashes."""
    path = Path(path)
    meta = read_checkpoint_meta(path)
    if ModelConfig.from_dict(meta["model"]) != model.config:
        raise CompatibilityError("checkpoint model config differs from the model being loaded")
    model.check_frozen(meta["frozen"])
    model.load_trainable_state({k: torch.load(path / f"{k}.pt") for k in ("descriptor", "vpe", "hilora")})
    if (path / "clusters.pt").exists():
        from .inference import clusters_from_state

        model.clusters = clusters_from_state(torch.load(path / "clusters.pt"))
    if trainer is not None:
        trainer.load_state_dict(torch.load(path / "optimizer.pt"))
    return meta


def train(manifest: CorpusManifest, model: CoEmoGenModel, config: TrainConfig, *, out_dir: str | os.PathLike | None = None,
          data: TrainingData | None = None, root=None, resume: str | os.PathLike | None = None,
          log_path: str | os.PathLike | None = None, stop_at: int | None = None, progress: bool = False) -> Trainer:
    """Run ``config.iterations`` steps over oversampled epochs (or until ``stop_at``)."""
    manifest = CorpusManifest([r for r in manifest.records if r.ok])
    if not manifest.records:
        raise DataError("manifest has no usable records")
    data = data or TrainingData(manifest, model, root)
    trainer = Trainer(model, config)
    manifest_hash = manifest.digest()
    if resume is not None:
        meta = load_checkpoint(resume, model, trainer)
        if meta["train"] != config.to_dict():
            raise CompatibilityError("resume config differs from the checkpointed train config")
    stop = config.iterations if stop_at is None else min(stop_at, config.iterations)
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    log = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for it, records in batches_for(manifest, config, trainer.iteration, stop):
            report = trainer.step(records, data)
            if log:
                log.write(json.dumps(report) + "\n")
            if progress and report["iteration"] % 100 == 0:
                logger.info("iter %d total %.4f", report["iteration"], report["total"])
            if out_dir and config.checkpoint_every and report["iteration"] % config.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"iter_{report['iteration']:06d}", model, trainer, config, manifest_hash)
    finally:
        if log:
            log.close()
    if out_dir:
        save_checkpoint(out_dir, model, trainer, config, manifest_hash)
    return trainer


# -- base denoiser pretraining (test profile stand-in for pretrained weights) ------

@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 32
    learning_rate: float = 2e-3
    null_prob: float = 0.1
    seed: int = 0


def pretrain_base_denoiser(manifest: CorpusManifest, config: ModelConfig, pretrain: PretrainConfig = PretrainConfig(),
                           *, root=None, loader=None, progress: bool = False) -> dict[str, torch.Tensor]:
    """Fit a caption-conditioned toy U-Net; its weights play the role of frozen pretrained weights.

    The objective is the MSE of the network body's own target (``v`` by default),
    which weights high-noise steps, where the caption decides the image, far more
    than a plain noise MSE would.
    """
    from .diffusion import ToyUNet, add_noise
    from .encoders import build_toy_encoders

    loader = loader or FileImageLoader(root)
    records = [r for r in manifest.records if r.ok and r.caption]
    if not records:
        raise DataError("pretraining needs captioned records")
    image_enc, text_enc = build_toy_encoders(config.encoder_profile)
    with torch.no_grad():
        images = torch.stack([load_image_tensor(loader(r.image_ref), config.image_size) for r in records])
        contexts = []
        for i in range(0, len(records), 64):
            enc = text_enc.encode_text([r.caption for r in records[i:i + 64]])
            contexts.append(enc.pooled.unsqueeze(1) if config.context_mode == "pooled" else enc.sequence)
        contexts = torch.cat(contexts)
        null = text_enc.null_condition(1)
        null = (null.pooled.unsqueeze(1) if config.context_mode == "pooled" else null.sequence)[0]
    from .diffusion import NoiseSchedule

    schedule = NoiseSchedule(config.T)
    with torch.random.fork_rng():
        torch.manual_seed(config.init_seed)
        net = ToyUNet(config.denoiser_config)
    opt = torch.optim.AdamW(net.parameters(), lr=pretrain.learning_rate, weight_decay=0.0)
    g = torch.Generator().manual_seed(derive_seed(pretrain.seed, "pretrain"))
    n = len(records)
    for step in range(pretrain.steps):
        idx = torch.randint(0, n, (pretrain.batch_size,), generator=g)
        x0 = images[idx]
        ctx = contexts[idx].clone()
        drop = torch.rand(pretrain.batch_size, generator=g) < pretrain.null_prob
        ctx[drop] = null
        t = torch.randint(0, schedule.T, (pretrain.batch_size,), generator=g)
        noise = torch.randn(x0.shape, generator=g)
        zt = add_noise(x0, t, noise, schedule)
        if net.config.prediction == "v":
            a, s = schedule.coefficients(t)
            a, s = a.reshape(-1, 1, 1, 1), s.reshape(-1, 1, 1, 1)
            target = a * noise - s * x0
        else:
            target = noise
        loss = ((net.body(zt, t, ctx) - target) ** 2).mean()
        lr = pretrain.learning_rate * min(1.0, (step + 1) / 100)
        for group in opt.param_groups:
            group["lr"] = lr
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if progress and (step + 1) % 100 == 0:
            logger.info("pretrain step %d loss %.4f", step + 1, loss.item())
    return {k: v.detach().clone() for k, v in net.state_dict().items()}
