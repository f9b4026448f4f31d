"""Evaluation: inception-style score under a proxy classifier, plus
per-attribute fidelity probes that measure how much scene information the
generated images actually carry."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from torch import nn

from .scenes import (
    COLOR_NAMES,
    FIRST_OBJECT_CLASSES,
    SHAPE_NAMES,
    derive_seed,
    first_object_class,
    load_png,
    save_png,
    to_uint8,
)


class JudgeUnreliableError(RuntimeError):
    """Raised when the proxy judge misses its held-out accuracy floor."""


def _label_second(spec, names, field):
    if len(spec.objects) < 2:
        return -1
    return names.index(getattr(spec.objects[1], field))


# attribute -> (class count, spec -> label or -1 when undefined)
ATTRIBUTES = {
    "background_color": (len(COLOR_NAMES), lambda s: COLOR_NAMES.index(s.background_color)),
    "first_color": (len(COLOR_NAMES), lambda s: COLOR_NAMES.index(s.objects[0].color)),
    "first_shape": (len(SHAPE_NAMES), lambda s: SHAPE_NAMES.index(s.objects[0].shape)),
    "object_count": (3, lambda s: len(s.objects) - 1),
    "second_color": (len(COLOR_NAMES), lambda s: _label_second(s, COLOR_NAMES, "color")),
    "second_shape": (len(SHAPE_NAMES), lambda s: _label_second(s, SHAPE_NAMES, "shape")),
}

DIALOGUE_ONLY_ATTRIBUTES = ("background_color", "second_color", "second_shape")


class _ConvTrunk(nn.Module):
    """Small position-aware convnet: the flattened feature map feeds the
    heads directly so raster-order attributes stay recoverable."""

    def __init__(self, resolution: int, hidden: int = 128):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2),
            nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2),
            nn.Conv2d(32, 64, 3, padding=1), nn.ReLU(inplace=True),
        )
        side = resolution // 4
        if side < 1:
            raise ValueError(f"resolution {resolution} too small for the judge trunk")
        self.fc = nn.Sequential(nn.Flatten(), nn.Linear(64 * side * side, hidden), nn.ReLU(inplace=True))
        self.out_dim = hidden

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x))


def _to_nchw(images: np.ndarray) -> torch.Tensor:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[-1] != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError(f"expected (N, R, R, 3) images, got shape {arr.shape}")
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def _params_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for key, tensor in module.state_dict().items():
        h.update(key.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class _TorchClassifierBase(BaseEstimator):
    def _train_loop(self, model, images_t, target_loss_fn, n):
        rng = np.random.default_rng(derive_seed(self.seed, 11))
        opt = torch.optim.Adam(model.parameters(), lr=self.lr)
        model.train()
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n - self.batch_size + 1, self.batch_size):
                rows = order[start : start + self.batch_size]
                loss = target_loss_fn(model(images_t[rows]), rows)
                opt.zero_grad()
                loss.backward()
                opt.step()
        model.eval()


class ProxyShapeClassifier(_TorchClassifierBase, ClassifierMixin):
    """18-way judge over (first-object shape x color), the scoring surrogate.

    fit() holds out val_fraction of the data; if held-out accuracy lands
    under accuracy_floor the judge is unreliable and fitting fails.
    """

    def __init__(self, epochs=20, batch_size=64, lr=1e-3, val_fraction=0.2,
                 accuracy_floor=0.9, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.val_fraction = val_fraction
        self.accuracy_floor = accuracy_floor
        self.seed = seed

    def fit(self, images: np.ndarray, labels) -> "ProxyShapeClassifier":
        images_t = _to_nchw(images)
        labels_t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        if images_t.shape[0] != labels_t.shape[0]:
            raise ValueError("images and labels length mismatch")
        n = images_t.shape[0]
        torch.manual_seed(derive_seed(self.seed, 10))
        rng = np.random.default_rng(derive_seed(self.seed, 12))
        order = rng.permutation(n)
        n_val = max(1, int(round(self.val_fraction * n)))
        val_rows, train_rows = order[:n_val], order[n_val:]
        model = nn.Sequential(
            _ConvTrunk(images_t.shape[-1]),
            nn.Linear(128, FIRST_OBJECT_CLASSES),
        )
        ce = nn.CrossEntropyLoss()
        self._train_loop(
            model, images_t[train_rows],
            lambda logits, rows: ce(logits, labels_t[train_rows][rows]),
            len(train_rows),
        )
        with torch.no_grad():
            val_pred = model(images_t[val_rows]).argmax(dim=1)
        accuracy = float((val_pred == labels_t[val_rows]).float().mean())
        if accuracy < self.accuracy_floor:
            raise JudgeUnreliableError(
                f"proxy judge held-out accuracy {accuracy:.3f} below floor {self.accuracy_floor}"
            )
        self.model_ = model
        self.classes_ = np.arange(FIRST_OBJECT_CLASSES)
        self.val_accuracy_ = accuracy
        self.resolution_ = int(images_t.shape[-1])
        self.manifest_ = {
            "n_classes": FIRST_OBJECT_CLASSES,
            "n_train": int(len(train_rows)),
            "n_val": int(n_val),
            "val_accuracy": accuracy,
            "digest": _params_digest(model),
        }
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this ProxyShapeClassifier instance is not fitted yet")

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        self._check_fitted()
        images_t = _to_nchw(images)
        with torch.no_grad():
            probs = torch.softmax(self.model_(images_t), dim=1).double().numpy()
        return probs / probs.sum(axis=1, keepdims=True)

    def predict(self, images: np.ndarray) -> np.ndarray:
        return self.predict_proba(images).argmax(axis=1)


class _MultiHeadNet(nn.Module):
    """Trunk whose forward yields features; heads are registered submodules
    so one optimizer covers everything."""

    def __init__(self, trunk: _ConvTrunk, heads: nn.ModuleDict):
        super().__init__()
        self.trunk = trunk
        self.heads = heads

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x)


class AttributeJudge(_TorchClassifierBase):
    """Shared trunk + one linear head per scene attribute, trained on real
    renders; second-object heads learn only from scenes that have one."""

    def __init__(self, epochs=20, batch_size=64, lr=1e-3, val_fraction=0.2, seed=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, images: np.ndarray, specs) -> "AttributeJudge":
        images_t = _to_nchw(images)
        if images_t.shape[0] != len(specs):
            raise ValueError("images and specs length mismatch")
        labels = {
            name: torch.as_tensor([fn(s) for s in specs], dtype=torch.long)
            for name, (_, fn) in ATTRIBUTES.items()
        }
        n = images_t.shape[0]
        torch.manual_seed(derive_seed(self.seed, 20))
        rng = np.random.default_rng(derive_seed(self.seed, 21))
        order = rng.permutation(n)
        n_val = max(1, int(round(self.val_fraction * n)))
        val_rows, train_rows = order[:n_val], order[n_val:]

        trunk = _ConvTrunk(images_t.shape[-1])
        heads = nn.ModuleDict(
            {name: nn.Linear(trunk.out_dim, n_classes) for name, (n_classes, _) in ATTRIBUTES.items()}
        )
        model = _MultiHeadNet(trunk, heads)
        ce = nn.CrossEntropyLoss()

        train_labels = {name: lab[train_rows] for name, lab in labels.items()}

        def loss_fn(feats, rows):
            total = 0.0
            for name in ATTRIBUTES:
                lab = train_labels[name][rows]
                valid = lab >= 0
                if valid.any():
                    total = total + ce(heads[name](feats)[valid], lab[valid])
            return total

        self._train_loop(model, images_t[train_rows], loss_fn, len(train_rows))
        self.model_ = model
        self.resolution_ = int(images_t.shape[-1])
        with torch.no_grad():
            feats = model(images_t[val_rows])
            val_accuracy = {}
            for name in ATTRIBUTES:
                lab = labels[name][val_rows]
                valid = lab >= 0
                pred = heads[name](feats).argmax(dim=1)
                val_accuracy[name] = float((pred[valid] == lab[valid]).float().mean()) if valid.any() else float("nan")
        self.val_accuracy_ = val_accuracy
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this AttributeJudge instance is not fitted yet")

    def predict(self, images: np.ndarray) -> dict[str, np.ndarray]:
        self._check_fitted()
        images_t = _to_nchw(images)
        with torch.no_grad():
            feats = self.model_(images_t)
            return {
                name: self.model_.heads[name](feats).argmax(dim=1).numpy()
                for name in ATTRIBUTES
            }


def attribute_fidelity(images: np.ndarray, specs, judge: AttributeJudge) -> dict[str, float]:
    """Accuracy of recovering each attribute from the images; attributes a
    scene does not define (second object of a singleton) are skipped."""
    if len(images) != len(specs):
        raise ValueError(f"got {len(images)} images for {len(specs)} specs")
    preds = judge.predict(images)
    out = {}
    for name, (_, fn) in ATTRIBUTES.items():
        labels = np.asarray([fn(s) for s in specs])
        valid = labels >= 0
        out[name] = float((preds[name][valid] == labels[valid]).mean()) if valid.any() else float("nan")
    return out


def train_proxy_classifier(samples, resolution: int, epochs=20, batch_size=64, lr=1e-3,
                           val_fraction=0.2, accuracy_floor=0.9, seed=0) -> ProxyShapeClassifier:
    """Fit the scoring judge on real renders of a labeled corpus."""
    images = np.stack([s.image(resolution) for s in samples])
    labels = np.asarray([first_object_class(s.spec) for s in samples])
    clf = ProxyShapeClassifier(epochs=epochs, batch_size=batch_size, lr=lr,
                               val_fraction=val_fraction, accuracy_floor=accuracy_floor, seed=seed)
    return clf.fit(images, labels)


@dataclass(frozen=True)
class ScoreReport:
    mean: float
    std: float
    n_splits: int
    split_size: int
    seed: int

    def to_json(self, classifier_digest: str = "") -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "n_splits": self.n_splits,
            "split_size": self.split_size,
            "seed": self.seed,
            "classifier_digest": classifier_digest,
        }


def validate_posteriors(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
        raise ValueError(f"posterior matrix must be 2-D and non-empty, got shape {p.shape}")
    if not np.isfinite(p).all() or (p < 0).any():
        raise ValueError("posterior rows must be finite and nonnegative")
    sums = p.sum(axis=1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValueError("posterior rows must sum to 1 within 1e-6")
    return p


def inception_style_score(p: np.ndarray, n_splits: int, split_size: int, seed: int) -> ScoreReport:
    """exp(mean_x KL(p(y|x) || split marginal)) per split; mean/std over
    splits. Splits are sampled without replacement within a split and
    independently across splits (overlap across splits is unavoidable when
    n_splits * split_size exceeds n)."""
    p = validate_posteriors(p)
    n = p.shape[0]
    if n_splits < 1:
        raise ValueError("n_splits must be >= 1")
    if not (1 <= split_size <= n):
        raise ValueError(f"split_size must be in 1..{n}, got {split_size}")
    rng = np.random.default_rng(seed)
    scores = []
    for _ in range(n_splits):
        part = p[rng.choice(n, size=split_size, replace=False)]
        marginal = part.mean(axis=0)
        logp = np.log(np.clip(part, 1e-12, None))
        logm = np.log(np.clip(marginal, 1e-12, None))
        # KL against any distribution is nonnegative; rounding in the
        # marginal can dip a per-image value a few ulp under zero, which
        # would let a constant matrix score fractionally below 1.
        kl_per_image = np.maximum((part * (logp - logm)).sum(axis=1), 0.0)
        scores.append(float(np.exp(kl_per_image.mean())))
    return ScoreReport(
        mean=float(np.mean(scores)),
        std=float(np.std(scores)),
        n_splits=int(n_splits),
        split_size=int(split_size),
        seed=int(seed),
    )


def generate_eval_set(model, samples, out_dir, seed: int) -> dict:
    """One generated image per pair: images/<id>.png, index.csv and a
    manifest with a content digest; deterministic under (model, seed)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    images = model.generate(samples, seed=seed)
    digest = hashlib.sha256()
    with open(out_dir / "index.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "image_file", "seed"])
        for sample, img in zip(samples, images):
            rel = f"images/{sample.id}.png"
            save_png(img, out_dir / rel)
            digest.update(to_uint8(img).tobytes())
            writer.writerow([sample.id, rel, seed])
    manifest = {"n": len(samples), "seed": int(seed), "digest": digest.hexdigest()}
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest


def load_eval_set(gen_dir) -> tuple[list[int], np.ndarray]:
    """Read back a generated set in index order."""
    gen_dir = Path(gen_dir)
    ids, images = [], []
    with open(gen_dir / "index.csv", newline="") as f:
        for row in csv.DictReader(f):
            ids.append(int(row["id"]))
            images.append(load_png(gen_dir / row["image_file"]))
    if not ids:
        raise ValueError(f"empty generated-set index under {gen_dir}")
    return ids, np.stack(images)


def evaluate_run(gen_dir, test_samples, judge_samples, out_dir, n_splits=10,
                 split_fraction=0.75, judge_epochs=20, judge_batch_size=64, judge_lr=1e-3,
                 val_fraction=0.2, accuracy_floor=0.9, seed=0, split_size=None) -> dict:
    """Score a generated set against its paired test specs.

    Trains the proxy judge and the attribute judge on real renders
    (judge_samples), scores the generated images, and writes score.json,
    fidelity.json and posteriors.csv under out_dir.
    """
    ids, images = load_eval_set(gen_dir)
    by_id = {s.id: s for s in test_samples}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ValueError(f"generated ids missing from the test set: {missing[:5]}")
    if len(ids) != len(test_samples):
        raise ValueError(f"generated set holds {len(ids)} images for {len(test_samples)} test pairs")
    ordered = [by_id[i] for i in ids]
    resolution = images.shape[1]

    proxy = train_proxy_classifier(judge_samples, resolution, epochs=judge_epochs,
                                   batch_size=judge_batch_size, lr=judge_lr,
                                   val_fraction=val_fraction, accuracy_floor=accuracy_floor, seed=seed)
    judge = AttributeJudge(epochs=judge_epochs, batch_size=judge_batch_size, lr=judge_lr,
                           val_fraction=val_fraction, seed=seed)
    judge.fit(np.stack([s.image(resolution) for s in judge_samples]), [s.spec for s in judge_samples])

    posteriors = proxy.predict_proba(images)
    if split_size is None:
        split_size = max(1, int(split_fraction * len(ids)))
    report = inception_style_score(posteriors, n_splits=n_splits, split_size=split_size, seed=seed)
    fidelity = attribute_fidelity(images, [s.spec for s in ordered], judge)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.savetxt(out_dir / "posteriors.csv", posteriors, delimiter=",")
    score_json = report.to_json(classifier_digest=proxy.manifest_["digest"])
    with open(out_dir / "score.json", "w") as f:
        json.dump(score_json, f, indent=2)
        f.write("\n")
    fidelity_json = {
        "n": len(ids),
        "resolution": int(resolution),
        "attributes": fidelity,
        "judge_val_accuracy": judge.val_accuracy_,
        "proxy_val_accuracy": proxy.val_accuracy_,
    }
    with open(out_dir / "fidelity.json", "w") as f:
        json.dump(fidelity_json, f, indent=2)
        f.write("\n")
    return {"score": score_json, "fidelity": fidelity_json}
