"""Recognizer pretraining, fine-tuning on real + synthetic pairs, and embedding export."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .core import (TrainConfig, load_checkpoint, load_modules, module_arrays, save_checkpoint,
                   seeded_rng, torch_seed_from)
from .dataio import Manifest, ManifestRow, PairedPool, load_images
from .nets import Recognizer

log = logging.getLogger(__name__)

PRETRAIN_BATCH = 8
HFR_LOG_FIELDS = ("step", "ce", "in", "hfr")


def _label_map(subjects) -> dict[int, int]:
    return {s: i for i, s in enumerate(sorted(set(int(s) for s in subjects)))}


def save_recognizer(path, model: Recognizer, classes, meta: dict | None = None) -> Path:
    m = {"kind": "recognizer", "n_classes": model.n_classes, "classes": [int(c) for c in classes]}
    m.update(meta or {})
    return save_checkpoint(path, module_arrays({"rec": model}), m)


def load_recognizer(path) -> tuple[Recognizer, dict]:
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "recognizer":
        raise ValueError(f"{path} is not a recognizer checkpoint")
    model = Recognizer(ckpt.meta["n_classes"])
    load_modules(ckpt.arrays, {"rec": model})
    model.eval()
    return model, ckpt.meta


@torch.no_grad()
def _accuracy(model: Recognizer, images: np.ndarray, labels: np.ndarray, batch: int = 128) -> float:
    hits = 0
    for s in range(0, len(labels), batch):
        _, logits = model(torch.from_numpy(images[s:s + batch]))
        hits += int((logits.argmax(1).numpy() == labels[s:s + batch]).sum())
    return hits / len(labels)


def pretrain_recognizer(manifest: Manifest, cfg: TrainConfig, out_path=None):
    """Classification pretraining on the V-domain training images.

    Returns ``(model, info)`` where info holds the class list and final train
    accuracy; writes a recognizer checkpoint when ``out_path`` is given.
    """
    rows = [r for r in manifest.rows if r.split == "train" and r.domain == "V"]
    classes = sorted({r.subject for r in rows})
    if len(classes) < 2:
        raise ValueError(f"need at least 2 training subjects, got {len(classes)}")
    lut = _label_map(classes)
    images = load_images(manifest, rows)
    labels = np.array([lut[r.subject] for r in rows], np.int64)

    rng = seeded_rng(cfg.seed)
    torch.manual_seed(torch_seed_from(rng))
    model = Recognizer(len(classes))
    opt = torch.optim.Adam(model.parameters(), lr=cfg.pretrain_lr)
    model.train()
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(len(labels))
        total = 0.0
        for s in range(0, len(order), PRETRAIN_BATCH):
            idx = order[s:s + PRETRAIN_BATCH]
            _, logits = model(torch.from_numpy(images[idx]))
            loss = torch.nn.functional.cross_entropy(logits, torch.from_numpy(labels[idx]))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        log.info("pretrain epoch %d loss %.4f", epoch + 1, total / len(order))
    model.eval()
    acc = _accuracy(model, images, labels)
    info = {"classes": classes, "train_accuracy": acc, "epochs": cfg.pretrain_epochs}
    if out_path is not None:
        save_recognizer(out_path, model, classes, {"train_accuracy": acc, "config": cfg.to_dict()})
    return model, info


@dataclass
class HfrResult:
    model: Recognizer
    log: list  # dicts with step, ce, in, hfr
    optimizer: dict


def finetune_hfr(init_path, real_manifest: Manifest, synth_manifest: Manifest | None, cfg: TrainConfig,
                 out_dir=None, real_pool: PairedPool | None = None,
                 synth_pool: PairedPool | None = None) -> HfrResult:
    """Fine-tune with cross-entropy on real pairs plus gamma-weighted intra-pair loss on synthetic pairs.

    With no synthetic data the intra-pair term is skipped entirely. Real and
    synthetic batches come from separate RNG streams so the real-batch sequence
    does not depend on whether synthetic data is used.
    """
    model, meta = load_recognizer(init_path)
    lut = {c: i for i, c in enumerate(meta["classes"])}
    real = real_pool if real_pool is not None else PairedPool.from_manifest(real_manifest, ("train",))
    if len(real) == 0:
        raise ValueError("no real training pairs")
    labels_all = np.array([lut.get(int(s), -1) for s in real.subjects], np.int64)
    if (labels_all < 0).any():
        raise ValueError("training subject missing from the recognizer's classification head")
    use_synth = synth_pool is not None or (synth_manifest is not None and len(synth_manifest) > 0)
    if use_synth and synth_pool is None:
        synth_pool = PairedPool.from_manifest(synth_manifest, ("synthetic",))
    if use_synth and len(synth_pool) == 0:
        use_synth = False

    rng_real = seeded_rng(cfg.seed)
    rng_synth = seeded_rng(cfg.seed + 0x5EED)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.sgd_lr, momentum=cfg.sgd_momentum,
                          weight_decay=cfg.sgd_weight_decay)
    optim_info = {"name": "SGD", "momentum": cfg.sgd_momentum, "lr": cfg.sgd_lr,
                  "weight_decay": cfg.sgd_weight_decay}
    log.info("HFR fine-tuning: SGD momentum=%g lr=%g weight_decay=%g", cfg.sgd_momentum, cfg.sgd_lr,
             cfg.sgd_weight_decay)
    model.train()
    rows = []
    B = cfg.hfr_batch_size
    for step in range(1, cfg.hfr_steps + 1):
        idx = rng_real.integers(0, len(real), size=B)
        y = torch.from_numpy(labels_all[idx])
        _, logit_n = model(torch.from_numpy(real.n[idx]))
        _, logit_v = model(torch.from_numpy(real.v[idx]))
        ce = L.loss_ce(logit_n, logit_v, y)
        loss = ce
        l_in = 0.0
        if use_synth:
            in_terms = []
            for _ in range(cfg.synth_per_real):
                sidx = rng_synth.integers(0, len(synth_pool), size=B)
                f_n, _ = model(torch.from_numpy(synth_pool.n[sidx]))
                f_v, _ = model(torch.from_numpy(synth_pool.v[sidx]))
                in_terms.append(L.loss_in(f_n, f_v))
            l_in_t = torch.stack(in_terms).mean()
            loss = ce + cfg.gamma * l_in_t
            l_in = l_in_t.item()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        ce_v = ce.item()
        rows.append({"step": step, "ce": ce_v, "in": l_in, "hfr": ce_v + cfg.gamma * l_in})
    model.eval()
    result = HfrResult(model, rows, optim_info)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_recognizer(out / "hfr.fsiad", model, meta["classes"],
                        {"config": cfg.to_dict(), "augmented": use_synth})
        with open(out / "hfr_log.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=HFR_LOG_FIELDS)
            w.writeheader()
            for r in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        (out / "hfr_run.json").write_text(json.dumps({"optimizer": optim_info, "augmented": use_synth,
                                                     "gamma": cfg.gamma, "steps": cfg.hfr_steps}, indent=2))
    return result


@dataclass
class EmbeddingTable:
    paths: list
    subjects: np.ndarray
    domains: list
    embeddings: np.ndarray  # rows are unit vectors

    def __len__(self):
        return len(self.paths)

    def select(self, mask) -> "EmbeddingTable":
        mask = np.asarray(mask, bool)
        return EmbeddingTable([p for p, m in zip(self.paths, mask) if m], self.subjects[mask],
                              [d for d, m in zip(self.domains, mask) if m], self.embeddings[mask])

    def write_csv(self, path):
        dim = self.embeddings.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "subject", "domain"] + [f"e{i}" for i in range(dim)])
            for p, s, d, e in zip(self.paths, self.subjects, self.domains, self.embeddings):
                w.writerow([p, int(s), d] + [repr(float(v)) for v in e])

    @classmethod
    def read_csv(cls, path) -> "EmbeddingTable":
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            next(r)
            rows = list(r)
        return cls([x[0] for x in rows], np.array([int(x[1]) for x in rows], np.int64),
                   [x[2] for x in rows], np.array([[float(v) for v in x[3:]] for x in rows], np.float64))


@torch.no_grad()
def embed_images(model: Recognizer, images: np.ndarray, batch: int = 128, normalize: bool = True) -> np.ndarray:
    out = []
    for s in range(0, len(images), batch):
        x = torch.from_numpy(np.ascontiguousarray(images[s:s + batch]))
        out.append((model(x)[0] if normalize else model.features(x)).numpy())
    return np.concatenate(out) if out else np.zeros((0, model.fc.out_features), np.float32)


def embed_set(model_or_path, manifest: Manifest, rows: list[ManifestRow]) -> EmbeddingTable:
    model = load_recognizer(model_or_path)[0] if not isinstance(model_or_path, Recognizer) else model_or_path
    images = load_images(manifest, rows)
    emb = embed_images(model, images)
    return EmbeddingTable([r.path for r in rows], np.array([r.subject for r in rows], np.int64),
                          [r.domain for r in rows], emb)
