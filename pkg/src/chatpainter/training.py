"""Matching-aware adversarial training for both stages.

Losses follow the printed objectives: the discriminator ascends
  E[log D(real, match)] + 1/2 E[log(1 - D(real, mismatch))]
                        + 1/2 E[log(1 - D(fake, match))],
the generator descends
  E[log(1 - D(fake, match))] + lambda * KL(N(mu, sigma) || N(0, I)),
with one D step then one G step per batch, Adam, and epoch-halved learning
rates. Stage-II trains against real images at the fine resolution with
Stage-I (generator, CA, encoders) frozen.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch import nn

from . import checkpoint as ckpt
from .conditioning import ConditioningAugmentation, kl_standard_normal
from .corpus import plan_batches
from .networks import (
    ModelDims,
    Stage1Discriminator,
    Stage1Generator,
    Stage2Discriminator,
    Stage2Generator,
)
from .scenes import derive_seed
from .text import (
    DIALOGUE_VARIANTS,
    EmbeddingBundle,
    FlatDialogueEncoder,
    RecurrentDialogueEncoder,
    SentenceEncoder,
    TokenBatch,
    Vocabulary,
    encode_bundle,
    prepare_token_batch,
)

LOG_FLOOR = 1e-8
METRIC_FIELDS = ("epoch", "lr", "loss_d", "loss_g", "kl", "d_real", "d_fake")


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries a diagnostic state dump."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


def lr_schedule(epoch: int, lr0: float, half_every: int) -> float:
    """lr0 halved once per `half_every` completed epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if lr0 <= 0 or half_every <= 0:
        raise ValueError("lr0 and half_every must be positive")
    return lr0 * 0.5 ** (epoch // half_every)


@dataclass
class MatchedBatch:
    """Real images with matching and rotation-mismatched condition bundles
    plus one noise vector per sample."""

    images: torch.Tensor
    bundle: EmbeddingBundle
    bundle_mismatch: EmbeddingBundle
    z: torch.Tensor


def build_matched_batch(images: torch.Tensor, tokens: TokenBatch, caption_encoder: SentenceEncoder,
                        dialogue_encoder, n_z: int,
                        generator: torch.Generator | None = None) -> MatchedBatch:
    if images.shape[0] < 2:
        raise ValueError(f"matched batches need >= 2 samples, got {images.shape[0]}")
    bundle = encode_bundle(caption_encoder, dialogue_encoder, tokens)
    z = torch.randn((images.shape[0], n_z), generator=generator, dtype=images.dtype)
    return MatchedBatch(images=images, bundle=bundle, bundle_mismatch=bundle.rolled(-1), z=z)


def matched_batch_from_embeddings(images: torch.Tensor, phi_t: torch.Tensor, zeta_d: torch.Tensor,
                                  n_z: int, generator: torch.Generator | None = None) -> MatchedBatch:
    """Same contract as build_matched_batch for pre-encoded (frozen) embeddings."""
    if images.shape[0] < 2:
        raise ValueError(f"matched batches need >= 2 samples, got {images.shape[0]}")
    bundle = EmbeddingBundle(phi_t=phi_t, zeta_d=zeta_d, e=torch.cat([phi_t, zeta_d], dim=-1))
    z = torch.randn((images.shape[0], n_z), generator=generator, dtype=images.dtype)
    return MatchedBatch(images=images, bundle=bundle, bundle_mismatch=bundle.rolled(-1), z=z)


def _clamped_log(x: torch.Tensor) -> torch.Tensor:
    return torch.log(x.clamp_min(LOG_FLOOR))


def d_loss_stage1(batch: MatchedBatch, g0: Stage1Generator, d0: Stage1Discriminator,
                  ca: ConditioningAugmentation, generator: torch.Generator | None = None,
                  eps_match: torch.Tensor | None = None, eps_mismatch: torch.Tensor | None = None):
    """L_D0 (to maximize). Conditions and fakes are constants for D's gradient."""
    with torch.no_grad():
        cs_match = ca(batch.bundle.e, eps_match, generator)
        cs_mismatch = ca(batch.bundle_mismatch.e, eps_mismatch, generator)
        fake = g0(batch.z, cs_match.c_hat)
    p_real = d0(batch.images, cs_match.c_hat)
    p_mismatch = d0(batch.images, cs_mismatch.c_hat)
    p_fake = d0(fake, cs_match.c_hat)
    loss = (
        _clamped_log(p_real).mean()
        + 0.5 * _clamped_log(1 - p_mismatch).mean()
        + 0.5 * _clamped_log(1 - p_fake).mean()
    )
    parts = {
        "d_real": float(p_real.detach().mean()),
        "d_fake": float(p_fake.detach().mean()),
        "d_mismatch": float(p_mismatch.detach().mean()),
    }
    return loss, parts


def g_loss_stage1(batch: MatchedBatch, g0: Stage1Generator, d0: Stage1Discriminator,
                  ca: ConditioningAugmentation, lam: float,
                  generator: torch.Generator | None = None,
                  epsilon: torch.Tensor | None = None, non_saturating: bool = False):
    """L_G0 (to minimize); gradient flows through G0, CA and the encoders."""
    cs = ca(batch.bundle.e, epsilon, generator)
    fake = g0(batch.z, cs.c_hat)
    p = d0(fake, cs.c_hat)
    adv = -_clamped_log(p).mean() if non_saturating else _clamped_log(1 - p).mean()
    kl = kl_standard_normal(cs.mu, cs.log_sigma).mean()
    loss = adv + lam * kl
    parts = {"adv": float(adv.detach()), "kl": float(kl.detach()), "d_on_fake": float(p.detach().mean())}
    return loss, parts


@dataclass
class FrozenStage1:
    """Stage-I sampling pathway (generator + CA) used, without gradients, to
    draw s0 during Stage-II training and generation."""

    generator: Stage1Generator
    ca: ConditioningAugmentation

    def freeze(self) -> "FrozenStage1":
        for module in (self.generator, self.ca):
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)
        return self

    def sample_s0(self, e: torch.Tensor, z: torch.Tensor,
                  generator: torch.Generator | None = None,
                  epsilon: torch.Tensor | None = None) -> torch.Tensor:
        with torch.no_grad():
            cs0 = self.ca(e, epsilon, generator)
            return self.generator(z, cs0.c_hat)


def d_loss_stage2(batch: MatchedBatch, frozen: FrozenStage1, g: Stage2Generator,
                  d: Stage2Discriminator, ca: ConditioningAugmentation,
                  generator: torch.Generator | None = None,
                  eps_s0: torch.Tensor | None = None, eps_match: torch.Tensor | None = None,
                  eps_mismatch: torch.Tensor | None = None):
    """L_D (to maximize); s0 ~ p_G0 with no gradient into Stage-I."""
    s0 = frozen.sample_s0(batch.bundle.e, batch.z, generator, eps_s0)
    with torch.no_grad():
        cs_match = ca(batch.bundle.e, eps_match, generator)
        cs_mismatch = ca(batch.bundle_mismatch.e, eps_mismatch, generator)
        fake = g(s0, cs_match.c_hat)
    p_real = d(batch.images, cs_match.c_hat)
    p_mismatch = d(batch.images, cs_mismatch.c_hat)
    p_fake = d(fake, cs_match.c_hat)
    loss = (
        _clamped_log(p_real).mean()
        + 0.5 * _clamped_log(1 - p_mismatch).mean()
        + 0.5 * _clamped_log(1 - p_fake).mean()
    )
    parts = {
        "d_real": float(p_real.detach().mean()),
        "d_fake": float(p_fake.detach().mean()),
        "d_mismatch": float(p_mismatch.detach().mean()),
    }
    return loss, parts


def g_loss_stage2(batch: MatchedBatch, frozen: FrozenStage1, g: Stage2Generator,
                  d: Stage2Discriminator, ca: ConditioningAugmentation, lam: float,
                  generator: torch.Generator | None = None,
                  eps_s0: torch.Tensor | None = None, epsilon: torch.Tensor | None = None,
                  non_saturating: bool = False):
    """L_G (to minimize); gradient flows through G and the Stage-II CA only."""
    s0 = frozen.sample_s0(batch.bundle.e, batch.z, generator, eps_s0)
    cs = ca(batch.bundle.e, epsilon, generator)
    fake = g(s0, cs.c_hat)
    p = d(fake, cs.c_hat)
    adv = -_clamped_log(p).mean() if non_saturating else _clamped_log(1 - p).mean()
    kl = kl_standard_normal(cs.mu, cs.log_sigma).mean()
    loss = adv + lam * kl
    parts = {"adv": float(adv.detach()), "kl": float(kl.detach()), "d_on_fake": float(p.detach().mean())}
    return loss, parts


def _images_tensor(samples, resolution: int) -> torch.Tensor:
    arrs = np.stack([s.image(resolution) for s in samples])
    return torch.from_numpy(arrs).permute(0, 3, 1, 2).contiguous()


def _texts_of(samples):
    for s in samples:
        yield s.caption
        for q, a in s.dialogue.turns:
            yield q
            yield a


class _StageEstimator(BaseEstimator):
    """Shared plumbing: vocabulary, encoders, metrics, checkpoints."""

    _stage = 0

    def _check_fitted(self):
        if not hasattr(self, "generator_"):
            raise NotFittedError(f"this {type(self).__name__} instance is not fitted yet")

    def _resolved_dims(self) -> ModelDims:
        dims = self.dims
        if dims is None:
            dims = ModelDims()
        elif isinstance(dims, dict):
            dims = ModelDims(**dims)
        return dims.validate()

    def _variant(self) -> str:
        if self.dialogue_encoder not in DIALOGUE_VARIANTS:
            raise ValueError(
                f"dialogue_encoder must be one of {DIALOGUE_VARIANTS}, got {self.dialogue_encoder!r}"
            )
        return self.dialogue_encoder

    def _build_encoders(self, vocab: Vocabulary):
        variant = self._variant()
        caption_encoder = SentenceEncoder(len(vocab), self.embed_dim, self.d_cap)
        if variant == "flat":
            dialogue_encoder = FlatDialogueEncoder(len(vocab), self.embed_dim, self.d_dlg)
            e_dim = self.d_cap + self.d_dlg
        elif variant == "recurrent":
            dialogue_encoder = RecurrentDialogueEncoder(len(vocab), self.embed_dim, self.d_turn, self.h_rnn)
            e_dim = self.d_cap + 2 * self.h_rnn
        else:
            dialogue_encoder = None
            e_dim = self.d_cap
        return caption_encoder, dialogue_encoder, e_dim

    def _named_module_params(self, modules: dict[str, nn.Module | None]):
        out = []
        for prefix, module in modules.items():
            if module is None:
                continue
            out.extend((f"{prefix}.{name}", p) for name, p in module.named_parameters())
        return out

    def _write_metrics(self, out_dir: Path):
        with open(out_dir / "metrics.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(METRIC_FIELDS)
            for row in self.history_:
                writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in METRIC_FIELDS])

    def _divergence_dump(self, epoch: int, batch_ids, d_parts, g_parts) -> dict:
        norms = {}
        for prefix, module in self._module_map().items():
            if module is None:
                continue
            total = math.fsum(float(p.detach().pow(2).sum()) for p in module.parameters())
            norms[prefix] = math.sqrt(total)
        return {
            "stage": self._stage,
            "epoch": epoch,
            "batch_ids": list(batch_ids),
            "d_parts": d_parts,
            "g_parts": g_parts,
            "param_norms": norms,
        }

    def _raise_diverged(self, which: str, epoch: int, batch_ids, d_parts, g_parts, out_dir: Path | None):
        dump = self._divergence_dump(epoch, batch_ids, d_parts, g_parts)
        if out_dir is not None:
            with open(out_dir / "diverged.json", "w") as f:
                json.dump(dump, f, indent=2)
        raise TrainingDiverged(f"non-finite {which} loss at epoch {epoch}", dump)

    # -- checkpoint plumbing ------------------------------------------------

    def _meta(self) -> dict:
        params = {}
        for key, value in self.get_params(deep=False).items():
            if key == "dims":
                continue
            if key == "stage1":
                value = None if value is None or not isinstance(value, (str, Path)) else str(value)
            if isinstance(value, Path):
                value = str(value)
            params[key] = value
        from dataclasses import asdict

        return {
            "format": "chatpainter-stage-checkpoint",
            "stage": self._stage,
            "epoch": self.epoch_,
            "params": params,
            "dims": asdict(self.dims_),
            "vocab": self.vocab_.tokens,
        }

    def _groups(self) -> dict[str, np.ndarray]:
        groups: dict[str, np.ndarray] = {}
        for prefix, module in self._module_map().items():
            if module is not None:
                groups.update(ckpt.module_groups(prefix, module))
        if getattr(self, "optimizer_state_", None):
            groups.update(self.optimizer_state_)
        return groups

    def _capture_optimizer_state(self, opt_d, opt_g, d_named, g_named):
        state = {}
        state.update(ckpt.optimizer_groups("optimizer.d", opt_d, d_named))
        state.update(ckpt.optimizer_groups("optimizer.g", opt_g, g_named))
        self.optimizer_state_ = state

    def save(self, path) -> None:
        self._check_fitted()
        ckpt.save_checkpoint(path, self._groups(), self._meta())

    @classmethod
    def load(cls, path) -> "_StageEstimator":
        groups, meta = ckpt.load_checkpoint(path)
        if meta.get("stage") != cls._stage:
            raise ckpt.CheckpointError(
                f"checkpoint holds stage {meta.get('stage')}, expected stage {cls._stage}"
            )
        est = cls(dims=dict(meta["dims"]), **meta["params"])
        est._materialize(Vocabulary(meta["vocab"]))
        for prefix, module in est._module_map().items():
            if module is not None:
                ckpt.load_module_groups(prefix, module, groups)
        est.optimizer_state_ = {k: v for k, v in groups.items() if k.startswith("optimizer.")}
        est.epoch_ = int(meta["epoch"])
        est.history_ = []
        return est


class Stage1Gan(_StageEstimator):
    """Stage-I trainer: coarse generator, matching-aware discriminator,
    jointly trained text encoders and CA."""

    _stage = 1

    def __init__(self, dims=None, dialogue_encoder="recurrent", embed_dim=16, d_cap=16,
                 d_turn=16, h_rnn=32, d_dlg=32, epochs=60, batch_size=16, lr0=2e-4,
                 lr_half_every=10, lambda_kl=2.0, beta1=0.5, beta2=0.999,
                 non_saturating=False, checkpoint_every=10, seed=0, out_dir=None):
        self.dims = dims
        self.dialogue_encoder = dialogue_encoder
        self.embed_dim = embed_dim
        self.d_cap = d_cap
        self.d_turn = d_turn
        self.h_rnn = h_rnn
        self.d_dlg = d_dlg
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.lr_half_every = lr_half_every
        self.lambda_kl = lambda_kl
        self.beta1 = beta1
        self.beta2 = beta2
        self.non_saturating = non_saturating
        self.checkpoint_every = checkpoint_every
        self.seed = seed
        self.out_dir = out_dir

    def _module_map(self) -> dict[str, nn.Module | None]:
        return {
            "caption_encoder": self.caption_encoder_,
            "dialogue_encoder": self.dialogue_encoder_,
            "ca": self.ca_,
            "generator": self.generator_,
            "discriminator": self.discriminator_,
        }

    def _materialize(self, vocab: Vocabulary) -> None:
        """Build all modules in a fixed order under the init seed."""
        self.dims_ = self._resolved_dims()
        self.vocab_ = vocab
        torch.manual_seed(derive_seed(self.seed, 1))
        self.caption_encoder_, self.dialogue_encoder_, e_dim = self._build_encoders(vocab)
        self.e_dim_ = e_dim
        self.ca_ = ConditioningAugmentation(e_dim, self.dims_.n_g)
        self.generator_ = Stage1Generator(self.dims_)
        self.discriminator_ = Stage1Discriminator(self.dims_)
        self.epoch_ = 0

    def fit(self, samples) -> "Stage1Gan":
        if len(samples) < self.batch_size:
            raise ValueError(f"need at least batch_size={self.batch_size} samples, got {len(samples)}")
        self._materialize(Vocabulary.from_texts(_texts_of(samples)))
        dims = self.dims_
        out_dir = None if self.out_dir is None else Path(self.out_dir)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)

        variant = self._variant()
        tokens = prepare_token_batch(self.vocab_, samples, variant)
        images = _images_tensor(samples, dims.w0)
        ids = [s.id for s in samples]
        row_of = {sid: i for i, sid in enumerate(ids)}

        d_named = self._named_module_params({"discriminator": self.discriminator_})
        g_named = self._named_module_params({
            "generator": self.generator_,
            "ca": self.ca_,
            "caption_encoder": self.caption_encoder_,
            "dialogue_encoder": self.dialogue_encoder_,
        })
        opt_d = torch.optim.Adam([p for _, p in d_named], lr=self.lr0, betas=(self.beta1, self.beta2))
        opt_g = torch.optim.Adam([p for _, p in g_named], lr=self.lr0, betas=(self.beta1, self.beta2))
        noise_gen = torch.Generator().manual_seed(derive_seed(self.seed, 2))

        self.history_ = []
        for epoch in range(self.epochs):
            lr = lr_schedule(epoch, self.lr0, self.lr_half_every)
            for opt in (opt_d, opt_g):
                for group in opt.param_groups:
                    group["lr"] = lr
            sums = {"loss_d": 0.0, "loss_g": 0.0, "kl": 0.0, "d_real": 0.0, "d_fake": 0.0}
            plan = plan_batches(ids, self.batch_size, epoch, self.seed)
            n_batches = 0
            for batch_ids in plan.batches():
                rows = [row_of[i] for i in batch_ids]
                batch = build_matched_batch(
                    images[rows], tokens.select(rows),
                    self.caption_encoder_, self.dialogue_encoder_, dims.n_z, noise_gen,
                )
                d_loss, d_parts = d_loss_stage1(batch, self.generator_, self.discriminator_, self.ca_, noise_gen)
                if not torch.isfinite(d_loss):
                    self._raise_diverged("discriminator", epoch, batch_ids, d_parts, {}, out_dir)
                opt_d.zero_grad()
                (-d_loss).backward()  # ascend L_D by descending its negation
                opt_d.step()

                g_loss, g_parts = g_loss_stage1(batch, self.generator_, self.discriminator_, self.ca_,
                                                self.lambda_kl, noise_gen, non_saturating=self.non_saturating)
                if not torch.isfinite(g_loss):
                    self._raise_diverged("generator", epoch, batch_ids, d_parts, g_parts, out_dir)
                opt_g.zero_grad()
                g_loss.backward()
                opt_g.step()

                sums["loss_d"] += float(d_loss.detach())
                sums["loss_g"] += float(g_loss.detach())
                sums["kl"] += g_parts["kl"]
                sums["d_real"] += d_parts["d_real"]
                sums["d_fake"] += d_parts["d_fake"]
                n_batches += 1
            row = {"epoch": epoch, "lr": lr}
            row.update({k: v / max(1, n_batches) for k, v in sums.items()})
            self.history_.append(row)
            self.epoch_ = epoch + 1
            if out_dir is not None:
                self._write_metrics(out_dir)
                if (epoch + 1) % self.checkpoint_every == 0 or epoch + 1 == self.epochs:
                    self._capture_optimizer_state(opt_d, opt_g, d_named, g_named)
                    self.save(out_dir / f"stage1_epoch{epoch + 1:04d}.ckpt")
        self._capture_optimizer_state(opt_d, opt_g, d_named, g_named)
        if out_dir is not None:
            self.save(out_dir / "stage1_final.ckpt")
        return self

    def generate(self, samples, seed: int = 0, chunk_size: int = 64) -> np.ndarray:
        """One image per sample, fresh (z, epsilon) derived from (seed, id)."""
        self._check_fitted()
        dims = self.dims_
        for module in self._module_map().values():
            if module is not None:
                module.eval()
        tokens = prepare_token_batch(self.vocab_, samples, self._variant())
        out = np.empty((len(samples), dims.w0, dims.h0, 3), dtype=np.float32)
        with torch.no_grad():
            for start in range(0, len(samples), chunk_size):
                rows = list(range(start, min(start + chunk_size, len(samples))))
                bundle = encode_bundle(self.caption_encoder_, self.dialogue_encoder_, tokens.select(rows))
                z = torch.empty(len(rows), dims.n_z)
                eps = torch.empty(len(rows), dims.n_g)
                for j, row in enumerate(rows):
                    gen = torch.Generator().manual_seed(derive_seed(seed, samples[row].id))
                    z[j] = torch.randn(dims.n_z, generator=gen)
                    eps[j] = torch.randn(dims.n_g, generator=gen)
                cs = self.ca_(bundle.e, eps)
                imgs = self.generator_(z, cs.c_hat)
                out[start : start + len(rows)] = imgs.permute(0, 2, 3, 1).numpy()
        for module in self._module_map().values():
            if module is not None:
                module.train()
        return out


class Stage2Gan(_StageEstimator):
    """Stage-II refiner: trains G/D/CA at the fine resolution against frozen
    Stage-I sampling and frozen encoders copied from Stage-I."""

    _stage = 2

    def __init__(self, stage1=None, dims=None, dialogue_encoder="recurrent", embed_dim=16,
                 d_cap=16, d_turn=16, h_rnn=32, d_dlg=32, epochs=60, batch_size=16, lr0=2e-4,
                 lr_half_every=10, lambda_kl=2.0, beta1=0.5, beta2=0.999,
                 non_saturating=False, checkpoint_every=10, seed=0, out_dir=None):
        self.stage1 = stage1
        self.dims = dims
        self.dialogue_encoder = dialogue_encoder
        self.embed_dim = embed_dim
        self.d_cap = d_cap
        self.d_turn = d_turn
        self.h_rnn = h_rnn
        self.d_dlg = d_dlg
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.lr_half_every = lr_half_every
        self.lambda_kl = lambda_kl
        self.beta1 = beta1
        self.beta2 = beta2
        self.non_saturating = non_saturating
        self.checkpoint_every = checkpoint_every
        self.seed = seed
        self.out_dir = out_dir

    def _module_map(self) -> dict[str, nn.Module | None]:
        return {
            "caption_encoder": self.caption_encoder_,
            "dialogue_encoder": self.dialogue_encoder_,
            "ca": self.ca_,
            "generator": self.generator_,
            "discriminator": self.discriminator_,
            "stage1_generator": self.stage1_generator_,
            "stage1_ca": self.stage1_ca_,
        }

    def _materialize(self, vocab: Vocabulary) -> None:
        self.dims_ = self._resolved_dims()
        self.vocab_ = vocab
        torch.manual_seed(derive_seed(self.seed, 1))
        self.caption_encoder_, self.dialogue_encoder_, e_dim = self._build_encoders(vocab)
        self.e_dim_ = e_dim
        self.ca_ = ConditioningAugmentation(e_dim, self.dims_.n_g)
        self.generator_ = Stage2Generator(self.dims_)
        self.discriminator_ = Stage2Discriminator(self.dims_)
        self.stage1_generator_ = Stage1Generator(self.dims_)
        self.stage1_ca_ = ConditioningAugmentation(e_dim, self.dims_.n_g)
        self.epoch_ = 0

    def _load_stage1(self) -> Stage1Gan:
        if self.stage1 is None:
            raise ValueError("Stage-II training requires a Stage-I checkpoint (stage1 parameter)")
        if isinstance(self.stage1, Stage1Gan):
            self.stage1._check_fitted()
            return self.stage1
        return Stage1Gan.load(self.stage1)

    def _adopt_stage1(self, stage1: Stage1Gan) -> None:
        """Copy encoders + Stage-I sampling path; all of it stays frozen here."""
        from dataclasses import asdict

        if asdict(stage1.dims_) != asdict(self.dims_):
            raise ckpt.CheckpointError(
                f"Stage-I checkpoint dims {asdict(stage1.dims_)} do not match configured dims {asdict(self.dims_)}"
            )
        for attr in ("dialogue_encoder", "embed_dim", "d_cap", "d_turn", "h_rnn", "d_dlg"):
            if getattr(stage1, attr) != getattr(self, attr):
                raise ckpt.CheckpointError(
                    f"Stage-I checkpoint {attr}={getattr(stage1, attr)!r} does not match configured {getattr(self, attr)!r}"
                )
        self.vocab_ = stage1.vocab_
        self.caption_encoder_.load_state_dict(stage1.caption_encoder_.state_dict())
        if self.dialogue_encoder_ is not None:
            self.dialogue_encoder_.load_state_dict(stage1.dialogue_encoder_.state_dict())
        self.stage1_generator_.load_state_dict(stage1.generator_.state_dict())
        self.stage1_ca_.load_state_dict(stage1.ca_.state_dict())
        for module in (self.caption_encoder_, self.dialogue_encoder_):
            if module is not None:
                module.eval()
                for p in module.parameters():
                    p.requires_grad_(False)
        self.frozen_ = FrozenStage1(self.stage1_generator_, self.stage1_ca_).freeze()

    def fit(self, samples) -> "Stage2Gan":
        if len(samples) < self.batch_size:
            raise ValueError(f"need at least batch_size={self.batch_size} samples, got {len(samples)}")
        stage1 = self._load_stage1()
        self._materialize(stage1.vocab_)
        self._adopt_stage1(stage1)
        dims = self.dims_
        out_dir = None if self.out_dir is None else Path(self.out_dir)
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)

        variant = self._variant()
        tokens = prepare_token_batch(self.vocab_, samples, variant)
        images = _images_tensor(samples, dims.w)
        ids = [s.id for s in samples]
        row_of = {sid: i for i, sid in enumerate(ids)}

        # encoders are frozen, so all embeddings are constants: precompute once
        with torch.no_grad():
            phi_parts, zeta_parts = [], []
            for start in range(0, len(samples), 256):
                rows = list(range(start, min(start + 256, len(samples))))
                bundle = encode_bundle(self.caption_encoder_, self.dialogue_encoder_, tokens.select(rows))
                phi_parts.append(bundle.phi_t)
                zeta_parts.append(bundle.zeta_d)
            phi_all = torch.cat(phi_parts)
            zeta_all = torch.cat(zeta_parts)

        d_named = self._named_module_params({"discriminator": self.discriminator_})
        g_named = self._named_module_params({"generator": self.generator_, "ca": self.ca_})
        opt_d = torch.optim.Adam([p for _, p in d_named], lr=self.lr0, betas=(self.beta1, self.beta2))
        opt_g = torch.optim.Adam([p for _, p in g_named], lr=self.lr0, betas=(self.beta1, self.beta2))
        noise_gen = torch.Generator().manual_seed(derive_seed(self.seed, 2))

        self.history_ = []
        for epoch in range(self.epochs):
            lr = lr_schedule(epoch, self.lr0, self.lr_half_every)
            for opt in (opt_d, opt_g):
                for group in opt.param_groups:
                    group["lr"] = lr
            sums = {"loss_d": 0.0, "loss_g": 0.0, "kl": 0.0, "d_real": 0.0, "d_fake": 0.0}
            plan = plan_batches(ids, self.batch_size, epoch, self.seed)
            n_batches = 0
            for batch_ids in plan.batches():
                rows = [row_of[i] for i in batch_ids]
                batch = matched_batch_from_embeddings(
                    images[rows], phi_all[rows], zeta_all[rows], dims.n_z, noise_gen
                )
                d_loss, d_parts = d_loss_stage2(batch, self.frozen_, self.generator_,
                                                self.discriminator_, self.ca_, noise_gen)
                if not torch.isfinite(d_loss):
                    self._raise_diverged("discriminator", epoch, batch_ids, d_parts, {}, out_dir)
                opt_d.zero_grad()
                (-d_loss).backward()
                opt_d.step()

                g_loss, g_parts = g_loss_stage2(batch, self.frozen_, self.generator_,
                                                self.discriminator_, self.ca_, self.lambda_kl,
                                                noise_gen, non_saturating=self.non_saturating)
                if not torch.isfinite(g_loss):
                    self._raise_diverged("generator", epoch, batch_ids, d_parts, g_parts, out_dir)
                opt_g.zero_grad()
                g_loss.backward()
                opt_g.step()

                sums["loss_d"] += float(d_loss.detach())
                sums["loss_g"] += float(g_loss.detach())
                sums["kl"] += g_parts["kl"]
                sums["d_real"] += d_parts["d_real"]
                sums["d_fake"] += d_parts["d_fake"]
                n_batches += 1
            row = {"epoch": epoch, "lr": lr}
            row.update({k: v / max(1, n_batches) for k, v in sums.items()})
            self.history_.append(row)
            self.epoch_ = epoch + 1
            if out_dir is not None:
                self._write_metrics(out_dir)
                if (epoch + 1) % self.checkpoint_every == 0 or epoch + 1 == self.epochs:
                    self._capture_optimizer_state(opt_d, opt_g, d_named, g_named)
                    self.save(out_dir / f"stage2_epoch{epoch + 1:04d}.ckpt")
        self._capture_optimizer_state(opt_d, opt_g, d_named, g_named)
        if out_dir is not None:
            self.save(out_dir / "stage2_final.ckpt")
        return self

    @classmethod
    def load(cls, path) -> "Stage2Gan":
        est = super().load(path)
        est.frozen_ = FrozenStage1(est.stage1_generator_, est.stage1_ca_).freeze()
        for module in (est.caption_encoder_, est.dialogue_encoder_):
            if module is not None:
                for p in module.parameters():
                    p.requires_grad_(False)
        return est

    def generate(self, samples, seed: int = 0, chunk_size: int = 64) -> np.ndarray:
        """One refined image per sample; draws (z, eps_s0, eps) from (seed, id)."""
        self._check_fitted()
        dims = self.dims_
        for module in self._module_map().values():
            if module is not None:
                module.eval()
        tokens = prepare_token_batch(self.vocab_, samples, self._variant())
        out = np.empty((len(samples), dims.w, dims.d, 3), dtype=np.float32)
        with torch.no_grad():
            for start in range(0, len(samples), chunk_size):
                rows = list(range(start, min(start + chunk_size, len(samples))))
                bundle = encode_bundle(self.caption_encoder_, self.dialogue_encoder_, tokens.select(rows))
                z = torch.empty(len(rows), dims.n_z)
                eps0 = torch.empty(len(rows), dims.n_g)
                eps = torch.empty(len(rows), dims.n_g)
                for j, row in enumerate(rows):
                    gen = torch.Generator().manual_seed(derive_seed(seed, samples[row].id))
                    z[j] = torch.randn(dims.n_z, generator=gen)
                    eps0[j] = torch.randn(dims.n_g, generator=gen)
                    eps[j] = torch.randn(dims.n_g, generator=gen)
                s0 = self.frozen_.sample_s0(bundle.e, z, epsilon=eps0)
                cs = self.ca_(bundle.e, eps)
                imgs = self.generator_(s0, cs.c_hat)
                out[start : start + len(rows)] = imgs.permute(0, 2, 3, 1).numpy()
        # trainable modules go back to train mode; frozen parts stay eval
        for module in (self.generator_, self.discriminator_, self.ca_):
            module.train()
        return out


def write_run_manifest(out_dir: Path, command: str, config: dict, artifacts: dict) -> Path:
    """Record the resolved config plus content digests for an output directory."""
    manifest = {"command": command, "config": config, "artifacts": artifacts}
    path = Path(out_dir) / "run_manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _file_digest(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def train_stage(config, data_dir, out_dir, stage: int, stage1_ckpt=None) -> Path:
    """Config-driven training entry: loads the corpus, fits the stage
    estimator, writes metrics, checkpoints and a run manifest; returns the
    final checkpoint path."""
    from .corpus import load_dataset

    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if stage == 2 and stage1_ckpt is None:
        raise ValueError("stage 2 requires a Stage-I checkpoint (--stage1-ckpt)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = config.dims()
    needed = dims.w0 if stage == 1 else dims.w
    samples = load_dataset(data_dir, resolutions=[needed])
    kwargs = config.estimator_kwargs()
    kwargs["out_dir"] = out_dir
    if stage == 1:
        estimator = Stage1Gan(**kwargs)
        final = out_dir / "stage1_final.ckpt"
    else:
        estimator = Stage2Gan(stage1=stage1_ckpt, **kwargs)
        final = out_dir / "stage2_final.ckpt"
    estimator.fit(samples)
    write_run_manifest(
        out_dir,
        f"train --stage {stage}",
        config.as_dict(),
        {"final_checkpoint": final.name, "checkpoint_digest": _file_digest(final),
         "epochs": estimator.epoch_},
    )
    return final
