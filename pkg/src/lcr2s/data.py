"""Synthetic multi-view identity data, feature files, sampling, support sets.

A dataset is a flat list of (identity, view, modality, feature) instances.
Image/text instances sharing an (identity, view) slot are paired; pairs are
the unit of batching.  Support sets collect other same-identity instances of
one modality around an anchor, which is what the fusion module consumes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IMAGE = 0
TEXT = 1

_MAGIC = b"LCRF"
_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_INSTANCE_HEAD = struct.Struct("<IIB3x")


class FeatureFormatError(ValueError):
    """Raised when a feature file fails structural validation."""


class SamplingError(ValueError):
    """Raised when a batch cannot be drawn from the dataset."""


class SupportSetError(ValueError):
    """Raised when a support set cannot be built in the requested mode."""


@dataclass(frozen=True)
class Instance:
    identity: int
    view: int
    modality: int  # IMAGE or TEXT
    feature: np.ndarray  # (input_dim,) float64


@dataclass(frozen=True)
class Dataset:
    instances: list[Instance]
    input_dim: int
    # (image instance index, text instance index) per pair, file order
    pairing: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.pairing:
            object.__setattr__(self, "pairing", _derive_pairing(self.instances))

    @property
    def n_pairs(self) -> int:
        return len(self.pairing)

    def identities(self) -> list[int]:
        """Distinct identities that own at least one pair, ascending."""
        return sorted({self.instances[i].identity for i, _ in self.pairing})

    def pairs_of_identity(self, identity: int) -> list[int]:
        return [k for k, (i, _) in enumerate(self.pairing)
                if self.instances[i].identity == identity]


def _derive_pairing(instances: list[Instance]) -> list[tuple[int, int]]:
    """Match images and texts at equal (identity, view), resolving ambiguity
    by file order: the k-th image pairs with the k-th text of the slot."""
    slots: dict[tuple[int, int], tuple[list[int], list[int]]] = {}
    order: list[tuple[int, int]] = []
    for idx, inst in enumerate(instances):
        key = (inst.identity, inst.view)
        if key not in slots:
            slots[key] = ([], [])
            order.append(key)
        slots[key][inst.modality].append(idx)
    pairing = []
    for key in order:
        imgs, txts = slots[key]
        pairing.extend(zip(imgs, txts))
    return pairing


@dataclass(frozen=True)
class SyntheticConfig:
    n_identities: int = 64
    views_per_identity: int = 4
    latent_dim: int = 16
    input_dim: int = 32
    view_offset_std: float = 0.5
    noise_std: float = 0.1
    seed: int = 0
    # seed for the view-offset/noise stream; identities and projections come
    # from `seed`, so two configs differing only here share a population but
    # show it from fresh views (held-out-camera evaluation)
    view_seed: int | None = None

    def validate(self) -> None:
        for name in ("n_identities", "views_per_identity", "latent_dim",
                     "input_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.view_offset_std < 0 or self.noise_std < 0:
            raise ValueError("stds must be >= 0")


@dataclass(frozen=True)
class Batch:
    image_features: np.ndarray  # (N, input_dim)
    text_features: np.ndarray  # (N, input_dim)
    labels: np.ndarray  # (N,) identity labels
    instance_indices: np.ndarray  # (N,) pair indices into Dataset.pairing


@dataclass(frozen=True)
class SupportSet:
    anchor: int  # pair index
    modality: int
    members: list[int]  # instance indices


@dataclass(frozen=True)
class SamplerConfig:
    P: int = 16
    K: int = 4
    seed: int = 0

    @property
    def batch_size(self) -> int:
        return self.P * self.K


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Draw a multi-view identity dataset from fixed random linear maps.

    Each identity gets a latent vector; each view shifts it by a per-view
    offset; modality features are linear projections of the shifted latent
    plus isotropic noise.  Fully determined by ``cfg.seed``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    proj_img = rng.normal(size=(cfg.latent_dim, cfg.input_dim)) / np.sqrt(cfg.latent_dim)
    proj_txt = rng.normal(size=(cfg.latent_dim, cfg.input_dim)) / np.sqrt(cfg.latent_dim)
    latents = rng.normal(size=(cfg.n_identities, cfg.latent_dim))
    view_seed = cfg.seed if cfg.view_seed is None else cfg.view_seed
    rng_view = np.random.default_rng([cfg.seed, view_seed])
    offsets = rng_view.normal(size=(cfg.n_identities, cfg.views_per_identity,
                                    cfg.latent_dim)) * cfg.view_offset_std

    instances: list[Instance] = []
    for ident in range(cfg.n_identities):
        for view in range(cfg.views_per_identity):
            z = latents[ident] + offsets[ident, view]
            img = z @ proj_img + rng_view.normal(size=cfg.input_dim) * cfg.noise_std
            txt = z @ proj_txt + rng_view.normal(size=cfg.input_dim) * cfg.noise_std
            instances.append(Instance(ident, view, IMAGE, img))
            instances.append(Instance(ident, view, TEXT, txt))
    return Dataset(instances=instances, input_dim=cfg.input_dim)


def save_features(ds: Dataset, path) -> None:
    """Write the little-endian feature file (f32 payload)."""
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, len(ds.instances), ds.input_dim))
        for inst in ds.instances:
            fh.write(_INSTANCE_HEAD.pack(inst.identity, inst.view, inst.modality))
            fh.write(np.asarray(inst.feature, dtype="<f4").tobytes())


def load_features(path) -> Dataset:
    """Read a feature file; structural failures name the byte offset."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FeatureFormatError(
            f"truncated header at byte offset {len(raw)}: need {_HEADER.size}")
    magic, version, n_instances, input_dim = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r} at byte offset 0")
    if version != _VERSION:
        raise FeatureFormatError(
            f"unsupported version {version} at byte offset 4")
    record = _INSTANCE_HEAD.size + 4 * input_dim
    expected = _HEADER.size + n_instances * record
    if len(raw) != expected:
        raise FeatureFormatError(
            f"payload size mismatch at byte offset {min(len(raw), expected)}: "
            f"expected {expected} bytes, got {len(raw)}")

    instances: list[Instance] = []
    off = _HEADER.size
    for _ in range(n_instances):
        identity, view, modality = _INSTANCE_HEAD.unpack_from(raw, off)
        if modality not in (IMAGE, TEXT):
            raise FeatureFormatError(
                f"invalid modality {modality} at byte offset {off + 8}")
        off += _INSTANCE_HEAD.size
        feat = np.frombuffer(raw, dtype="<f4", count=input_dim, offset=off)
        off += 4 * input_dim
        instances.append(Instance(identity, view, modality,
                                  feat.astype(np.float64)))
    return Dataset(instances=instances, input_dim=input_dim)


def sample_pk_batch(ds: Dataset, cfg: SamplerConfig,
                    rng: np.random.Generator) -> Batch:
    """Identity-balanced batch: P distinct identities, K pairs each.

    Pairs are drawn without replacement when an identity has at least K,
    otherwise with replacement.  Deterministic given the generator state.
    """
    idents = ds.identities()
    if len(idents) < cfg.P:
        raise SamplingError(
            f"need {cfg.P} identities, dataset has {len(idents)}")
    chosen = rng.choice(len(idents), size=cfg.P, replace=False)

    img_rows, txt_rows, labels, pair_idx = [], [], [], []
    for ci in chosen:
        ident = idents[ci]
        pool = ds.pairs_of_identity(ident)
        if len(pool) >= cfg.K:
            picks = rng.choice(len(pool), size=cfg.K, replace=False)
        else:
            picks = rng.choice(len(pool), size=cfg.K, replace=True)
        for p in picks:
            k = pool[p]
            i_img, i_txt = ds.pairing[k]
            img_rows.append(ds.instances[i_img].feature)
            txt_rows.append(ds.instances[i_txt].feature)
            labels.append(ident)
            pair_idx.append(k)
    return Batch(image_features=np.array(img_rows, dtype=np.float64),
                 text_features=np.array(txt_rows, dtype=np.float64),
                 labels=np.array(labels, dtype=np.int64),
                 instance_indices=np.array(pair_idx, dtype=np.int64))


EXCLUDE_SELF = "exclude_self"
DUPLICATE_SELF = "duplicate_self"


def build_support_set(ds: Dataset, anchor: int, modality: int, K: int,
                      mode: str, rng: np.random.Generator) -> SupportSet:
    """Support set for a pair's instance of one modality.

    ``exclude_self`` draws K same-identity, same-modality instances other
    than the anchor itself (without replacement when the pool allows);
    ``duplicate_self`` returns K copies of the anchor.
    """
    if K < 0:
        raise ValueError(f"K must be >= 0, got {K}")
    i_img, i_txt = ds.pairing[anchor]
    anchor_inst = i_img if modality == IMAGE else i_txt
    identity = ds.instances[anchor_inst].identity

    if mode == DUPLICATE_SELF:
        return SupportSet(anchor, modality, [anchor_inst] * K)
    if mode != EXCLUDE_SELF:
        raise ValueError(f"unknown support-set mode {mode!r}")

    pool = [i for i, inst in enumerate(ds.instances)
            if inst.identity == identity and inst.modality == modality
            and i != anchor_inst]
    if K == 0:
        return SupportSet(anchor, modality, [])
    if not pool:
        raise SupportSetError(
            f"no same-identity candidates for pair {anchor} "
            f"(identity {identity}, modality {modality})")
    if len(pool) >= K:
        picks = rng.choice(len(pool), size=K, replace=False)
    else:
        picks = rng.choice(len(pool), size=K, replace=True)
    return SupportSet(anchor, modality, [pool[p] for p in picks])


def support_features(ds: Dataset, ss: SupportSet) -> np.ndarray:
    """Member features stacked as a (K, input_dim) matrix."""
    if not ss.members:
        return np.zeros((0, ds.input_dim))
    return np.array([ds.instances[i].feature for i in ss.members])
