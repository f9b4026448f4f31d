"""Dataset loading and deterministic epoch batching."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenes import Dialogue, SceneSpec, load_png, spec_from_record, to_uint8


class DatasetError(ValueError):
    """Raised for on-disk corpora that violate the dataset contract."""


@dataclass
class PairedSample:
    """One (image set, caption, dialogue) record."""

    id: int
    image_by_resolution: dict[int, np.ndarray]  # res -> (res, res, 3) float32 in [-1, 1]
    caption: str
    dialogue: Dialogue
    spec: SceneSpec

    def image(self, resolution: int) -> np.ndarray:
        try:
            return self.image_by_resolution[resolution]
        except KeyError:
            raise DatasetError(
                f"sample {self.id} has no image at resolution {resolution}; "
                f"available: {sorted(self.image_by_resolution)}"
            ) from None


def load_dataset(data_dir, resolutions=None, verify_digest: bool = True) -> list[PairedSample]:
    """Load a corpus directory; record order equals metadata file order.

    Validates the id<->file bijection per resolution, turn counts, and the
    manifest digest (recomputed over metadata lines plus raw pixels).
    """
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest.json under {data_dir}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    all_res = [int(r) for r in manifest["resolutions"]]
    wanted = all_res if resolutions is None else [int(r) for r in resolutions]
    missing = sorted(set(wanted) - set(all_res))
    if missing:
        raise DatasetError(f"resolutions {missing} not present in dataset (has {all_res})")

    meta_path = data_dir / "metadata.jsonl"
    if not meta_path.exists():
        raise DatasetError(f"missing metadata.jsonl under {data_dir}")

    digest = hashlib.sha256()
    samples: list[PairedSample] = []
    ids: list[int] = []
    with open(meta_path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            digest.update(line.encode())
            rec = json.loads(line)
            sid = int(rec["id"])
            turns = tuple((t["q"], t["a"]) for t in rec["dialogue"])
            try:
                dialogue = Dialogue(turns=turns)
            except ValueError as exc:
                raise DatasetError(f"sample {sid}: {exc}") from exc
            images = {}
            for res in all_res:
                path = data_dir / "images" / str(res) / f"{sid}.png"
                if not path.exists():
                    raise DatasetError(f"sample {sid}: missing image {path}")
                img = load_png(path)
                if img.shape != (res, res, 3):
                    raise DatasetError(f"sample {sid}: image {path} has shape {img.shape}")
                digest.update(to_uint8(img).tobytes())
                if res in wanted:
                    images[res] = img
            ids.append(sid)
            samples.append(
                PairedSample(
                    id=sid,
                    image_by_resolution=images,
                    caption=rec["caption"],
                    dialogue=dialogue,
                    spec=spec_from_record(rec["spec"]),
                )
            )

    if len(samples) != int(manifest["n"]):
        raise DatasetError(f"manifest says n={manifest['n']} but metadata holds {len(samples)} records")
    if len(set(ids)) != len(ids):
        raise DatasetError("duplicate sample ids in metadata")
    for res in all_res:
        on_disk = {int(p.stem) for p in (data_dir / "images" / str(res)).glob("*.png")}
        extra = on_disk - set(ids)
        if extra:
            raise DatasetError(f"resolution {res}: image files without metadata records: {sorted(extra)[:5]}")
    if verify_digest and digest.hexdigest() != manifest["digest"]:
        raise DatasetError("dataset digest mismatch: files do not match manifest")
    return samples


@dataclass(frozen=True)
class BatchPlan:
    """Seeded full-batch partition of one epoch; ragged remainder dropped."""

    epoch: int
    batch_size: int
    order: tuple[int, ...]  # permuted sample ids
    rng_seed: int

    def batches(self) -> list[list[int]]:
        n_full = len(self.order) // self.batch_size
        return [
            list(self.order[i * self.batch_size : (i + 1) * self.batch_size])
            for i in range(n_full)
        ]


def plan_batches(sample_ids, batch_size: int, epoch: int, seed: int) -> BatchPlan:
    """Permute ids with an rng derived from (seed, epoch); same inputs, same plan."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    ids = np.asarray(list(sample_ids))
    if len(ids) < batch_size:
        raise ValueError(f"need at least one full batch: {len(ids)} samples < batch_size {batch_size}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch)]))
    order = tuple(int(i) for i in ids[rng.permutation(len(ids))])
    return BatchPlan(epoch=int(epoch), batch_size=int(batch_size), order=order, rng_seed=int(seed))
