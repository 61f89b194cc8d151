"""Alternating encoder / generator / discriminator training and pair synthesis."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .core import (Checkpoint, TrainConfig, load_checkpoint, load_modules, module_arrays,
                   restore_rng, rng_state, save_checkpoint, seeded_rng, torch_seed_from)
from .dataio import Manifest, ManifestRow, PairedPool, sample_training_pairs, write_png
from .nets import (AttributeEncoder, Generator, Recognizer, average_identity,
                   build_fsiad_nets, reparameterize)

log = logging.getLogger(__name__)

NETS = ("enc_n", "enc_v", "gen", "disc")
OPTIMS = ("opt_iad", "opt_g", "opt_d")
DIAG_FIELDS = ("d_real_median", "d_fake_median", "abs_cos_mu")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, iteration: int):
        super().__init__(f"non-finite loss term {term!r} at iteration {iteration}")
        self.term = term


def _cl(x: torch.Tensor) -> torch.Tensor:
    return x.contiguous(memory_format=torch.channels_last)


@dataclass
class TrainState:
    nets: dict
    e_id: Recognizer
    optims: dict
    iteration: int
    rng: np.random.Generator
    cfg: TrainConfig

    @property
    def encoder_params(self):
        return list(self.nets["enc_n"].parameters()) + list(self.nets["enc_v"].parameters())


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.adam_lr, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=1e-8,
                            foreach=True)


def init_state(cfg: TrainConfig, e_id: Recognizer, rng: np.random.Generator | None = None) -> TrainState:
    rng = rng if rng is not None else seeded_rng(cfg.seed)
    nets = build_fsiad_nets(cfg.resolution, cfg.width, torch_seed_from(rng))
    for m in nets.values():
        m.to(memory_format=torch.channels_last)
    e_id.to(memory_format=torch.channels_last)
    e_id.eval()
    for p in e_id.parameters():
        p.requires_grad_(False)
    enc = list(nets["enc_n"].parameters()) + list(nets["enc_v"].parameters())
    optims = {
        "opt_iad": _adam(enc, cfg),
        "opt_g": _adam(enc + list(nets["gen"].parameters()), cfg),
        "opt_d": _adam(nets["disc"].parameters(), cfg),
    }
    return TrainState(nets, e_id, optims, 0, rng, cfg)


def _ssim_cfg(resolution: int) -> L.SsimConfig:
    base = L.SsimConfig()
    return base.with_scales(base.max_scales(resolution))


def _check_finite(report: dict, keys, iteration: int):
    for k in keys:
        if not np.isfinite(report[k]):
            raise NonFiniteLossError(k, iteration)


def fsiad_iteration(state: TrainState, I: dict, X: dict, cfg: TrainConfig | None = None) -> dict:
    """One pass of the alternating update; mutates ``state`` and returns the loss report."""
    cfg = cfg or state.cfg
    enc_n, enc_v, gen, disc = (state.nets[k] for k in NETS)
    it = state.iteration + 1
    I_N, I_V = _cl(I["N"].data), _cl(I["V"].data)
    X_N, X_V = _cl(X["N"].data), _cl(X["V"].data)
    B = I_N.shape[0]
    report: dict = {}
    diag: dict = {}

    # (a) identity from the frozen encoder, attribute posteriors of the source pair
    with torch.no_grad():
        e_n, _ = state.e_id(I_N)
        e_v, _ = state.e_id(I_V)
        z_id = average_identity(e_n, e_v)
    eps = torch.as_tensor(state.rng.standard_normal((4, B, z_id.shape[1])), dtype=z_id.dtype)
    post_n, post_v = enc_n(I_N), enc_v(I_V)
    z_in, z_iv = reparameterize(post_n, eps=eps[0]), reparameterize(post_v, eps=eps[1])

    # (b) encoder update by the disentanglement + KL objective
    dis = L.loss_dis(z_id, z_in, z_iv)
    kl = L.loss_kl(post_n, post_v)
    iad = cfg.lambda_dis * dis + kl
    report.update(dis=dis.item(), kl=kl.item())
    _check_finite(report, ("dis", "kl"), it)
    state.optims["opt_iad"].zero_grad(set_to_none=True)
    iad.backward()
    state.optims["opt_iad"].step()

    # (c) recompute codes with the updated encoders; both synthesis branches
    # one pass per encoder over I and X; instance norm keeps samples independent
    post_n, post_xn = enc_n(torch.cat([I_N, X_N])).split(B)
    post_v, post_xv = enc_v(torch.cat([I_V, X_V])).split(B)
    codes = [reparameterize(p, eps=e) for p, e in zip((post_n, post_v, post_xn, post_xv), eps)]
    fakes = gen(z_id.repeat(4, 1), torch.cat(codes))
    rec_n, rec_v, xh_n, xh_v = fakes.split(B)
    xh = torch.cat([xh_n, xh_v])

    # (d) discriminator update with encoders and generator held fixed
    d_real = disc(torch.cat([I_N, I_V]))
    d_fake = disc(xh.detach())
    adv_d = L.loss_adv_d(d_real, d_fake)
    report["adv_d"] = adv_d.item()
    _check_finite(report, ("adv_d",), it)
    state.optims["opt_d"].zero_grad(set_to_none=True)
    adv_d.backward()
    state.optims["opt_d"].step()
    diag["d_real_median"] = float(d_real.detach().median())
    diag["d_fake_median"] = float(d_fake.detach().median())

    # (e) encoders + generator update with the discriminator held fixed
    for p in disc.parameters():
        p.requires_grad_(False)
    try:
        adv_g = L.loss_adv_g(disc(xh))
        rec = L.loss_rec(I_N, I_V, rec_n, rec_v)
        emb, _ = state.e_id(fakes)
        ip = L.loss_ip(z_id, emb.split(B))
        zhat_n, zhat_v = enc_n(xh_n).mu, enc_v(xh_v).mu
        attr = L.loss_attr(codes[2], codes[3], zhat_n, zhat_v)
        sim = L.loss_sim(torch.cat([X_N, X_V]), xh, cfg.alpha, _ssim_cfg(cfg.resolution))
        integ = ip + attr + sim
        if cfg.int_only:
            fsm = integ
        else:
            fsm = rec + cfg.lambda_int * integ + cfg.lambda_adv * adv_g
        report.update(rec=rec.item(), ip=ip.item(), attr=attr.item(), sim=sim.item(), adv_g=adv_g.item())
        _check_finite(report, ("rec", "ip", "attr", "sim", "adv_g"), it)
        state.optims["opt_g"].zero_grad(set_to_none=True)
        fsm.backward()
        state.optims["opt_g"].step()
    finally:
        for p in disc.parameters():
            p.requires_grad_(True)

    with torch.no_grad():
        diag["abs_cos_mu"] = float(F.cosine_similarity(z_id.repeat(2, 1), torch.cat([post_n.mu, post_v.mu])).abs().mean())
    # recognition terms belong to the HFR stage and are logged as zero here
    report.update({"ce": 0.0, "in": 0.0})
    report = L.aggregate(report, cfg)
    report["diag"] = diag
    state.iteration = it
    return report


# --------------------------------------------------------------------------
# checkpoints


def _optim_arrays(state: TrainState) -> dict:
    out = {}
    for name, opt in state.optims.items():
        sd = opt.state_dict()
        for idx, st in sd["state"].items():
            for key, val in st.items():
                out[f"{name}.{idx}.{key}"] = val.detach().cpu().numpy().copy()
    return out


def state_to_arrays(state: TrainState) -> dict:
    arrays = module_arrays(state.nets)
    arrays.update(module_arrays({"e_id": state.e_id}))
    arrays.update(_optim_arrays(state))
    return arrays


def state_meta(state: TrainState) -> dict:
    return {
        "kind": "fsiad",
        "config": state.cfg.to_dict(),
        "iteration": state.iteration,
        "rng_state": rng_state(state.rng),
        "n_classes": state.e_id.n_classes,
    }


def save_state(path, state: TrainState) -> Path:
    return save_checkpoint(path, state_to_arrays(state), state_meta(state))


def state_from_checkpoint(ckpt: Checkpoint) -> TrainState:
    """Rebuild a resumable training state (networks, optimizer moments, RNG)."""
    cfg = TrainConfig.from_dict(ckpt.meta["config"])
    e_id = Recognizer(ckpt.meta["n_classes"])
    load_modules(ckpt.arrays, {"e_id": e_id})
    state = init_state(cfg, e_id, seeded_rng(0))
    load_modules(ckpt.arrays, state.nets)
    for name, opt in state.optims.items():
        sd = opt.state_dict()
        n_params = len(sd["param_groups"][0]["params"])
        new_state = {}
        for idx in range(n_params):
            keys = [k for k in ("step", "exp_avg", "exp_avg_sq") if f"{name}.{idx}.{k}" in ckpt.arrays]
            if keys:
                new_state[idx] = {k: torch.from_numpy(np.array(ckpt.arrays[f"{name}.{idx}.{k}"])) for k in keys}
        sd["state"] = new_state
        opt.load_state_dict(sd)
    state.iteration = int(ckpt.meta["iteration"])
    state.rng = restore_rng(ckpt.meta["rng_state"])
    return state


def load_generator_bundle(path):
    """(encoder_n, encoder_v, generator, e_id, cfg) from an FSIAD checkpoint, in eval mode."""
    ckpt = load_checkpoint(path)
    if ckpt.meta.get("kind") != "fsiad":
        raise ValueError(f"{path} is not an FSIAD checkpoint")
    cfg = TrainConfig.from_dict(ckpt.meta["config"])
    enc_n = AttributeEncoder(cfg.resolution, cfg.width)
    enc_v = AttributeEncoder(cfg.resolution, cfg.width)
    gen = Generator(cfg.resolution, cfg.width)
    e_id = Recognizer(ckpt.meta["n_classes"])
    load_modules(ckpt.arrays, {"enc_n": enc_n, "enc_v": enc_v, "gen": gen, "e_id": e_id})
    for m in (enc_n, enc_v, gen, e_id):
        m.eval()
    return enc_n, enc_v, gen, e_id, cfg


# --------------------------------------------------------------------------
# training loop


def train_fsiad(manifest: Manifest, cfg: TrainConfig, e_id: Recognizer, out_dir,
                pool: PairedPool | None = None) -> Path:
    """Run ``cfg.iterations`` alternating updates; returns the final checkpoint path.

    Writes ``losses.csv`` (one row per iteration), ``diagnostics.csv`` and
    periodic checkpoints every ``max(1, T // 10)`` iterations.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pool = pool if pool is not None else PairedPool.from_manifest(manifest, ("train",))
    if pool.resolution != cfg.resolution:
        raise ValueError(f"dataset resolution {pool.resolution} != config resolution {cfg.resolution}")
    state = init_state(cfg, e_id)
    every = max(1, cfg.iterations // 10)
    with open(out / "losses.csv", "w") as lf, open(out / "diagnostics.csv", "w") as df:
        lf.write(L.csv_header() + "\n")
        df.write("iteration," + ",".join(DIAG_FIELDS) + "\n")
        for _ in range(cfg.iterations):
            I, X = sample_training_pairs(pool, state.rng, cfg.batch_size)
            report = fsiad_iteration(state, I, X, cfg)
            lf.write(L.csv_row(state.iteration, report) + "\n")
            df.write(f"{state.iteration}," + ",".join(repr(report["diag"][k]) for k in DIAG_FIELDS) + "\n")
            if state.iteration % every == 0:
                lf.flush()
                df.flush()
                save_state(out / f"ckpt_{state.iteration:06d}.fsiad", state)
                log.info("iter %d rec=%.2f dis=%.3f adv_d=%.3f", state.iteration, report["rec"],
                         report["dis"], report["adv_d"])
    return save_state(out / "fsiad.fsiad", state)


# --------------------------------------------------------------------------
# augmentation


@torch.no_grad()
def synthesize_arrays(bundle, pool: PairedPool, n: int, rng: np.random.Generator, batch_size: int = 32):
    """Generate ``n`` synthetic pairs sharing the identity of a random source pair.

    Returns (X~_N, X~_V, source subjects, reference indices).
    """
    if n <= 0:
        raise ValueError("number of synthetic pairs must be positive")
    enc_n, enc_v, gen, e_id, _ = bundle
    outs_n, outs_v, subj, refs = [], [], [], []
    done = 0
    while done < n:
        b = min(batch_size, n - done)
        idx_i = rng.integers(0, len(pool), size=b)
        idx_x = rng.integers(0, len(pool), size=b)
        I_N, I_V = torch.from_numpy(pool.n[idx_i]), torch.from_numpy(pool.v[idx_i])
        X_N, X_V = torch.from_numpy(pool.n[idx_x]), torch.from_numpy(pool.v[idx_x])
        z_id = average_identity(e_id(I_N)[0], e_id(I_V)[0])
        eps = torch.as_tensor(rng.standard_normal((2, b, z_id.shape[1])), dtype=z_id.dtype)
        z_n = reparameterize(enc_n(X_N), eps=eps[0])
        z_v = reparameterize(enc_v(X_V), eps=eps[1])
        outs_n.append(gen(z_id, z_n).numpy())
        outs_v.append(gen(z_id, z_v).numpy())
        subj.append(pool.subjects[idx_i])
        refs.append(idx_x)
        done += b
    return (np.concatenate(outs_n), np.concatenate(outs_v), np.concatenate(subj), np.concatenate(refs))


def synthesize_pairs(checkpoint_path, manifest: Manifest, n: int, rng: np.random.Generator, out_dir,
                     pool: PairedPool | None = None) -> Manifest:
    """Write ``n`` synthetic N/V pairs plus a manifest with ``pair_id`` and split ``synthetic``."""
    if n <= 0:
        raise ValueError("number of synthetic pairs must be positive")
    bundle = load_generator_bundle(checkpoint_path)
    pool = pool if pool is not None else PairedPool.from_manifest(manifest, ("train",))
    xn, xv, _, refs = synthesize_arrays(bundle, pool, n, rng)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rows = []
    for pid in range(n):
        pose, illum, expr, bg = (float(v) for v in pool.attrs[refs[pid]]) if pool.attrs is not None else (0.0, 1.0, 0.0, 0.5)
        for domain, arr in (("N", xn), ("V", xv)):
            rel = f"images/p{pid:06d}_{domain}.png"
            write_png(out / rel, arr[pid])
            rows.append(ManifestRow(rel, -1, domain, pose, illum, expr, bg, "synthetic", pid))
    synth = Manifest(rows, out)
    synth.write(out / "manifest.tsv")
    return synth


@torch.no_grad()
def identity_attribute_cosine(bundle, pool: PairedPool, rng: np.random.Generator, batch_size: int = 64):
    """Mean |cos(z_id, z_attr)| over every pair of ``pool``, for sampled codes and for means."""
    enc_n, enc_v, _, e_id, _ = bundle
    sampled, means = [], []
    for start in range(0, len(pool), batch_size):
        I_N = torch.from_numpy(pool.n[start:start + batch_size])
        I_V = torch.from_numpy(pool.v[start:start + batch_size])
        z_id = average_identity(e_id(I_N)[0], e_id(I_V)[0])
        for enc, img in ((enc_n, I_N), (enc_v, I_V)):
            post = enc(img)
            z = reparameterize(post, rng)
            sampled.append(F.cosine_similarity(z_id, z).abs())
            means.append(F.cosine_similarity(z_id, post.mu).abs())
    return float(torch.cat(sampled).mean()), float(torch.cat(means).mean())
