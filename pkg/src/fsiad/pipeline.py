"""Evaluation drivers shared by the CLI and the acceptance tests."""
from __future__ import annotations

import numpy as np
import torch

from . import evalmetrics as M
from .dataio import Manifest, PairedPool
from .hfr import embed_images, embed_set, load_recognizer
from .trainer import load_generator_bundle, synthesize_arrays

EVAL_SPLITS = ("gallery", "probe", "heldout")


def recognition_metrics(recognizer_path, manifest: Manifest):
    """Rank-1 and VR@FAR on the gallery (V) / probe (N) protocol.

    Returns ``(metrics, roc)``.
    """
    model, _ = load_recognizer(recognizer_path)
    gal_rows = [r for r in manifest.rows if r.split == "gallery"]
    probe_rows = [r for r in manifest.rows if r.split == "probe"]
    gal = embed_set(model, manifest, gal_rows)
    probe = embed_set(model, manifest, probe_rows)
    r1 = M.rank1(gal.embeddings, gal.subjects, probe.embeddings, probe.subjects)
    roc = M.roc_and_vr(M.score_sets(gal.embeddings, gal.subjects, probe.embeddings, probe.subjects))
    metrics = {"rank1": r1}
    for f in M.FAR_LEVELS:
        metrics[f"vr@far={f:g}"] = roc.vr_at[f]
    return metrics, roc


def intra_class_cosine(recognizer_path_or_model, pool: PairedPool) -> float:
    """Mean cosine between the N and V embeddings of the same pair."""
    model = recognizer_path_or_model
    if not isinstance(model, torch.nn.Module):
        model, _ = load_recognizer(model)
    e_n = embed_images(model, pool.n)
    e_v = embed_images(model, pool.v)
    return float(np.mean(np.sum(e_n * e_v, axis=1)))


@torch.no_grad()
def _reconstruct(bundle, pool: PairedPool, batch: int = 64):
    from .nets import average_identity

    enc_n, enc_v, gen, e_id, _ = bundle
    out_n, out_v = [], []
    for s in range(0, len(pool), batch):
        I_N = torch.from_numpy(pool.n[s:s + batch])
        I_V = torch.from_numpy(pool.v[s:s + batch])
        z_id = average_identity(e_id(I_N)[0], e_id(I_V)[0])
        out_n.append(gen(z_id, enc_n(I_N).mu).numpy())
        out_v.append(gen(z_id, enc_v(I_V).mu).numpy())
    return np.concatenate(out_n), np.concatenate(out_v)


def synthesis_metrics(fsiad_path, recognizer_path, manifest: Manifest, rng: np.random.Generator,
                      n_pairs: int = 256):
    """FID and attribute SSIM of synthesized images, with noise / shuffled baselines.

    FID features are the recognizer's penultimate (un-normalised) embeddings.
    """
    bundle = load_generator_bundle(fsiad_path)
    model, _ = load_recognizer(recognizer_path)
    pool = PairedPool.from_manifest(manifest, ("train",) + EVAL_SPLITS)
    feats = lambda imgs: embed_images(model, imgs, normalize=False)  # noqa: E731
    rec_n, rec_v = _reconstruct(bundle, pool)
    xn, xv, _, refs = synthesize_arrays(bundle, pool, n_pairs, rng)
    noise = rng.uniform(-1.0, 1.0, size=pool.v.shape).astype(np.float32)
    shuffle = rng.permutation(n_pairs)
    out = {}
    for dom, real, rec, synth in (("N", pool.n, rec_n, xn), ("V", pool.v, rec_v, xv)):
        real_m = M.MomentSummary.from_features(feats(real))
        out[f"fid_{dom}"] = M.fid(real_m, M.MomentSummary.from_features(feats(synth)))
        out[f"fid_rec_{dom}"] = M.fid(real_m, M.MomentSummary.from_features(feats(rec)))
        out[f"fid_noise_{dom}"] = M.fid(real_m, M.MomentSummary.from_features(feats(noise)))
        refs_img = real[refs]
        out[f"ssim_{dom}"] = M.attribute_ssim(refs_img, synth)
        out[f"ssim_shuffled_{dom}"] = M.attribute_ssim(refs_img, synth[shuffle])
    return out


@torch.no_grad()
def identity_attribute_cosine(fsiad_path, manifest: Manifest, rng: np.random.Generator,
                              splits=EVAL_SPLITS, batch: int = 64) -> dict:
    """Mean |cos(z_id, z_attr)| over both domains of every pair in ``splits``.

    ``sampled`` uses reparameterized attribute codes, ``mean`` the posterior means.
    """
    from .nets import average_identity, reparameterize

    enc_n, enc_v, _, e_id, _ = load_generator_bundle(fsiad_path)
    pool = PairedPool.from_manifest(manifest, splits)
    if len(pool) == 0:
        raise ValueError(f"no pairs in splits {tuple(splits)}")
    sampled, means = [], []
    for s in range(0, len(pool), batch):
        I_N = torch.from_numpy(pool.n[s:s + batch])
        I_V = torch.from_numpy(pool.v[s:s + batch])
        z_id = average_identity(e_id(I_N)[0], e_id(I_V)[0])
        for enc, img in ((enc_n, I_N), (enc_v, I_V)):
            post = enc(img)
            z = reparameterize(post, rng)
            sampled.append(torch.nn.functional.cosine_similarity(z_id, z).abs().numpy())
            means.append(torch.nn.functional.cosine_similarity(z_id, post.mu).abs().numpy())
    return {"sampled": float(np.concatenate(sampled).mean()), "mean": float(np.concatenate(means).mean()),
            "n_pairs": len(pool)}
