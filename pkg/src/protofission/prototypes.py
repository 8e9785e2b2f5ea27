"""Learnable prototype bank: composition, similarities, parameter plumbing.

Each class owns one shared global direction plus V local directions; slot i
of class c is the convex blend

    p[c,i] = (1 - lam[c,i]) * unit(global_comp[c]) + lam[c,i] * unit(local_comp[c,i])

with lam[c,i] = (tanh(mix_raw[c,i]) + 1) / 2, so the blend weight is free of
box constraints. Similarities to features are cosine; the blended prototype
is deliberately NOT re-normalized before the cosine (the cosine normalizes
implicitly), so a near-antipodal global/local pair at lam ~ 0.5 can drive
||p|| toward zero. That case raises DegenerateNorm, and the optimizer-side
re-projection (:func:`reproject_small_norms`) keeps raw parameter norms off
the floor to begin with.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .diffmath import EPS_NORM
from .errors import BadMagic, DegenerateNorm, ShapeMismatch, TruncatedFile

CHECKPOINT_MAGIC = b"PFBK"
CHECKPOINT_VERSION = 1

# Raw parameter vectors shorter than this after an optimizer step are pushed
# back out (direction preserved) so normalization never blows up.
REPROJECT_FLOOR = 1e-6


@dataclass
class PrototypeBank:
    """All learnable parameters.

    Fields:
        num_classes: N, classes with prototype slots (incl. novel slots).
        protos_per_class: V, slots per class.
        feat_dim: d, embedding dimensionality.
        global_comp: (N, d) shared per-class direction, raw (unnormalized).
        local_comp: (N, V, d) per-slot directions, raw.
        mix_raw: (N, V) pre-tanh blend parameters.
    """

    num_classes: int
    protos_per_class: int
    feat_dim: int
    global_comp: np.ndarray
    local_comp: np.ndarray
    mix_raw: np.ndarray

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(
            self.num_classes,
            self.protos_per_class,
            self.feat_dim,
            self.global_comp.copy(),
            self.local_comp.copy(),
            self.mix_raw.copy(),
        )

    @property
    def num_params(self) -> int:
        n, v, d = self.num_classes, self.protos_per_class, self.feat_dim
        return n * d + n * v * d + n * v


@dataclass
class ComposedPrototype:
    """One blended prototype: direction, provenance, and blend weight."""

    p: np.ndarray
    class_id: int
    slot: int
    lam: float


@dataclass
class SimilarityRow:
    """Cosine similarities between one feature and one class's V slots."""

    sims: np.ndarray
    per_class_max: float
    argmax_slot: int


@dataclass
class BankGrad:
    """Gradient (or any cotangent) with the same shapes as a bank."""

    global_comp: np.ndarray
    local_comp: np.ndarray
    mix_raw: np.ndarray

    @classmethod
    def zeros_like(cls, bank: PrototypeBank) -> "BankGrad":
        return cls(
            np.zeros_like(bank.global_comp),
            np.zeros_like(bank.local_comp),
            np.zeros_like(bank.mix_raw),
        )

    def add_scaled(self, other: "BankGrad", scale: float = 1.0) -> "BankGrad":
        self.global_comp += scale * other.global_comp
        self.local_comp += scale * other.local_comp
        self.mix_raw += scale * other.mix_raw
        return self

    def scaled(self, scale: float) -> "BankGrad":
        return BankGrad(
            scale * self.global_comp,
            scale * self.local_comp,
            scale * self.mix_raw,
        )

    def to_flat(self) -> np.ndarray:
        return np.concatenate(
            [self.global_comp.ravel(), self.local_comp.ravel(), self.mix_raw.ravel()]
        )

    def max_abs(self) -> float:
        return max(
            float(np.max(np.abs(self.global_comp), initial=0.0)),
            float(np.max(np.abs(self.local_comp), initial=0.0)),
            float(np.max(np.abs(self.mix_raw), initial=0.0)),
        )


def init_bank(num_classes: int, protos_per_class: int, feat_dim: int,
              seed: int) -> PrototypeBank:
    """Fresh bank: unit-Gaussian directions normalized, blend weights at 0.5.

    mix_raw starts at 0 so neither the global nor the local component
    dominates; everything is deterministic given the seed.
    """
    if min(num_classes, protos_per_class, feat_dim) < 1:
        raise ValueError("num_classes, protos_per_class, feat_dim must be >= 1")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((num_classes, feat_dim))
    g /= np.linalg.norm(g, axis=-1, keepdims=True)
    l = rng.standard_normal((num_classes, protos_per_class, feat_dim))
    l /= np.linalg.norm(l, axis=-1, keepdims=True)
    mix = np.zeros((num_classes, protos_per_class))
    return PrototypeBank(num_classes, protos_per_class, feat_dim, g, l, mix)


def lambda_of(mix_raw):
    """Blend weight (tanh(raw) + 1) / 2, strictly inside (0, 1)."""
    return 0.5 * (np.tanh(mix_raw) + 1.0)


def lambda_of_vjp(mix_raw, upstream):
    """d lambda / d raw = (1 - tanh^2(raw)) / 2."""
    t = np.tanh(mix_raw)
    return upstream * 0.5 * (1.0 - t * t)


@dataclass
class SimCache:
    """Forward intermediates needed by :func:`batch_sims_vjp`."""

    feats_hat: np.ndarray      # (M, d)
    feat_norms: np.ndarray     # (M,)
    g_hat: np.ndarray          # (N, d)
    g_norms: np.ndarray        # (N,)
    l_hat: np.ndarray          # (N, V, d)
    l_norms: np.ndarray        # (N, V)
    lam: np.ndarray            # (N, V)
    tanh_raw: np.ndarray       # (N, V)
    protos: np.ndarray         # (N, V, d)
    proto_norms: np.ndarray    # (N, V)
    sims: np.ndarray           # (M, N, V)


def _unit_rows(x: np.ndarray, what: str):
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms <= EPS_NORM):
        raise DegenerateNorm(f"{what} contains a vector with norm <= {EPS_NORM:.0e}")
    return x / norms[..., None], norms


def compose_all(bank: PrototypeBank):
    """Blend every slot's prototype; returns ((N, V, d) array, partial cache)."""
    g_hat, g_norms = _unit_rows(bank.global_comp, "global_comp")
    l_hat, l_norms = _unit_rows(bank.local_comp, "local_comp")
    tanh_raw = np.tanh(bank.mix_raw)
    lam = 0.5 * (tanh_raw + 1.0)
    protos = (1.0 - lam)[..., None] * g_hat[:, None, :] + lam[..., None] * l_hat
    return protos, (g_hat, g_norms, l_hat, l_norms, lam, tanh_raw)


def batch_sims(bank: PrototypeBank, feats: np.ndarray):
    """Cosine similarity of every feature to every composed prototype.

    Args:
        feats: (M, d) feature batch; every row must be above the norm floor.

    Returns:
        (sims, cache): sims is (M, N, V); cache feeds batch_sims_vjp.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[None, :]
    if feats.shape[1] != bank.feat_dim:
        raise ShapeMismatch(f"feats dim {feats.shape[1]} != bank dim {bank.feat_dim}")
    protos, (g_hat, g_norms, l_hat, l_norms, lam, tanh_raw) = compose_all(bank)
    proto_norms = np.linalg.norm(protos, axis=-1)
    if np.any(proto_norms <= EPS_NORM):
        raise DegenerateNorm("a composed prototype collapsed to near-zero norm")
    feats_hat, feat_norms = _unit_rows(feats, "feats")
    # (M, d) x (N, V, d) -> (M, N, V)
    sims = np.einsum("md,nvd->mnv", feats_hat, protos) / proto_norms[None, :, :]
    sims = np.clip(sims, -1.0, 1.0)
    cache = SimCache(feats_hat, feat_norms, g_hat, g_norms, l_hat, l_norms,
                     lam, tanh_raw, protos, proto_norms, sims)
    return sims, cache


def batch_sims_vjp(cache: SimCache, upstream: np.ndarray,
                   want_feat_grad: bool = False):
    """Pull an (M, N, V) sensitivity on sims back to bank parameters.

    Chain: sims -> blended prototype -> (unit global, unit local, lambda)
    -> (raw global, raw local, mix_raw). Feature gradients are optional
    because most losses treat the embeddings as fixed inputs.
    """
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != cache.sims.shape:
        raise ShapeMismatch(f"upstream shape {up.shape} != sims {cache.sims.shape}")
    pn = cache.proto_norms
    ph = cache.protos / pn[..., None]
    # d sims[m,n,v] / d protos[n,v] = (feats_hat[m] - sims * ph[n,v]) / pn[n,v]
    d_protos = (
        np.einsum("mnv,md->nvd", up, cache.feats_hat)
        - np.einsum("mnv,mnv->nv", up, cache.sims)[..., None] * ph
    ) / pn[..., None]

    lam = cache.lam
    d_g_hat = np.einsum("nv,nvd->nd", 1.0 - lam, d_protos)
    d_l_hat = lam[..., None] * d_protos
    d_lam = np.einsum("nvd,nvd->nv", d_protos, cache.l_hat - cache.g_hat[:, None, :])

    # through normalization: (u - <u, xh> xh) / ||x||
    d_g = (d_g_hat - np.einsum("nd,nd->n", d_g_hat, cache.g_hat)[:, None]
           * cache.g_hat) / cache.g_norms[:, None]
    d_l = (d_l_hat - np.einsum("nvd,nvd->nv", d_l_hat, cache.l_hat)[..., None]
           * cache.l_hat) / cache.l_norms[..., None]
    d_mix = d_lam * 0.5 * (1.0 - cache.tanh_raw**2)

    grad = BankGrad(d_g, d_l, d_mix)
    if not want_feat_grad:
        return grad
    d_feats_hat = np.einsum("mnv,nvd->md", up, ph) \
        - np.einsum("mnv,mnv->m", up, cache.sims)[:, None] * cache.feats_hat
    d_feats = d_feats_hat / cache.feat_norms[:, None]
    return grad, d_feats


def compose(bank: PrototypeBank, class_id: int, slot: int) -> ComposedPrototype:
    """Blend one slot's prototype from its global/local components."""
    _check_index(bank, class_id, slot)
    g_hat = bank.global_comp[class_id]
    l_raw = bank.local_comp[class_id, slot]
    gn = float(np.linalg.norm(g_hat))
    ln = float(np.linalg.norm(l_raw))
    if gn <= EPS_NORM or ln <= EPS_NORM:
        raise DegenerateNorm(f"component norm too small: g {gn:.3e}, l {ln:.3e}")
    lam = float(lambda_of(bank.mix_raw[class_id, slot]))
    p = (1.0 - lam) * (g_hat / gn) + lam * (l_raw / ln)
    return ComposedPrototype(p, class_id, slot, lam)


def class_similarities(bank: PrototypeBank, feat: np.ndarray,
                       class_id: int) -> SimilarityRow:
    """Cosines between one feature and all V slots of one class.

    Argmax ties break to the lowest slot index so the max subgradient is
    deterministic.
    """
    _check_index(bank, class_id, 0)
    sims, _ = batch_sims(bank, np.asarray(feat, dtype=np.float64)[None, :])
    row = sims[0, class_id, :]
    arg = int(np.argmax(row))  # np.argmax already takes the first maximum
    return SimilarityRow(row, float(row[arg]), arg)


def all_logits(bank: PrototypeBank, feat: np.ndarray) -> np.ndarray:
    """(N, V) cosine similarities of one feature to every slot."""
    sims, _ = batch_sims(bank, np.asarray(feat, dtype=np.float64)[None, :])
    return sims[0]


def _check_index(bank: PrototypeBank, class_id: int, slot: int) -> None:
    if not (0 <= class_id < bank.num_classes):
        raise IndexError(f"class {class_id} out of range [0, {bank.num_classes})")
    if not (0 <= slot < bank.protos_per_class):
        raise IndexError(f"slot {slot} out of range [0, {bank.protos_per_class})")


def flatten_params(bank: PrototypeBank) -> np.ndarray:
    """Stable parameter ordering: global by class, local by class-then-slot,
    then mix_raw by class-then-slot."""
    return np.concatenate(
        [bank.global_comp.ravel(), bank.local_comp.ravel(), bank.mix_raw.ravel()]
    )


def unflatten_params(vec: np.ndarray, num_classes: int, protos_per_class: int,
                     feat_dim: int) -> PrototypeBank:
    """Inverse of flatten_params for the given shape triple."""
    vec = np.asarray(vec, dtype=np.float64).ravel()
    n, v, d = num_classes, protos_per_class, feat_dim
    expected = n * d + n * v * d + n * v
    if vec.size != expected:
        raise ShapeMismatch(f"expected {expected} params, got {vec.size}")
    g = vec[: n * d].reshape(n, d).copy()
    l = vec[n * d: n * d + n * v * d].reshape(n, v, d).copy()
    mix = vec[n * d + n * v * d:].reshape(n, v).copy()
    return PrototypeBank(n, v, d, g, l, mix)


def reproject_small_norms(bank: PrototypeBank, rng: np.random.Generator) -> int:
    """Push tiny raw component vectors back to the reprojection floor.

    Direction is preserved; exactly-zero vectors are re-randomized since they
    have no direction to preserve. Returns how many vectors were touched.
    Call after every optimizer step.
    """
    touched = 0
    for arr in (bank.global_comp, bank.local_comp):
        flat = arr.reshape(-1, bank.feat_dim)
        norms = np.linalg.norm(flat, axis=-1)
        for idx in np.nonzero(norms < REPROJECT_FLOOR)[0]:
            if norms[idx] == 0.0:
                fresh = rng.standard_normal(bank.feat_dim)
                flat[idx] = REPROJECT_FLOOR * fresh / np.linalg.norm(fresh)
            else:
                flat[idx] *= REPROJECT_FLOOR / norms[idx]
            touched += 1
    return touched


def save_bank(bank: PrototypeBank, path) -> None:
    """Write a bank checkpoint: PFBK header then float64 flatten order."""
    header = struct.pack(
        "<4sIIII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
        bank.num_classes, bank.protos_per_class, bank.feat_dim,
    )
    payload = flatten_params(bank).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_bank(path) -> PrototypeBank:
    """Read a PFBK checkpoint back into a bank."""
    with open(path, "rb") as fh:
        header = fh.read(20)
        if len(header) < 20:
            raise TruncatedFile(f"{path}: header truncated")
        magic, version, n, v, d = struct.unpack("<4sIIII", header)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagic(f"{path}: expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise BadMagic(f"{path}: unsupported version {version}")
        expected = n * d + n * v * d + n * v
        raw = fh.read(expected * 8)
        if len(raw) != expected * 8:
            raise TruncatedFile(f"{path}: payload shorter than header promises")
        vec = np.frombuffer(raw, dtype="<f8").copy()
    return unflatten_params(vec, n, v, d)
