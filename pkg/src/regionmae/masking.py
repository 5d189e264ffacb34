"""Mask generation on the patch x temporal-patch lattice, plus mask application.

Region strategies draw from a macroregion's patch set under one of the three
classification criteria; the Random/Window/Tube strategies are
region-agnostic baselines. All sampling is seed-deterministic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .atlas import PatchSets
from .errors import ConfigurationError, ValidationError

REGION_ANY = "REGION_ANY"
REGION_MAJORITY = "REGION_MAJORITY"
REGION_PURE = "REGION_PURE"
RANDOM_RANDOM = "RANDOM_RANDOM"
WINDOW_RANDOM = "WINDOW_RANDOM"
RANDOM_TUBE = "RANDOM_TUBE"

STRATEGIES = (REGION_ANY, REGION_MAJORITY, REGION_PURE,
              RANDOM_RANDOM, WINDOW_RANDOM, RANDOM_TUBE)
_REGION_CRITERION = {REGION_ANY: "any", REGION_MAJORITY: "majority",
                     REGION_PURE: "pure"}

TUBE = "TUBE"
PER_FRAME = "PER_FRAME"

DROP = "DROP"
REPLACE_LEARNED = "REPLACE_LEARNED"


@dataclass(frozen=True)
class MaskSpec:
    strategy: str
    region: str | None = None
    ratio: float = 1.0
    temporal_mode: str = TUBE
    seed: int = 0
    window_block: tuple[int, int, int] = (2, 2, 2)

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy {self.strategy!r}")
        if not 0.0 < self.ratio <= 1.0:
            raise ValidationError(f"ratio must lie in (0, 1], got {self.ratio}")
        if self.temporal_mode not in (TUBE, PER_FRAME):
            raise ValidationError(f"unknown temporal mode {self.temporal_mode!r}")
        if self.strategy in _REGION_CRITERION and not self.region:
            raise ValidationError(f"{self.strategy} requires a region")
        if any(b < 1 for b in self.window_block):
            raise ValidationError("window_block entries must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window_block"] = list(self.window_block)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSpec":
        d = dict(d)
        if "window_block" in d:
            d["window_block"] = tuple(d["window_block"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()


@dataclass
class MaskTensor:
    """Boolean [n_patches, t_patches] lattice; True marks a masked slot."""

    mask: np.ndarray
    voxels_per_patch: int
    t_patch_len: int = 1

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 2:
            raise ValidationError("mask must be [n_patches, t_patches]")

    @property
    def n_patches(self) -> int:
        return self.mask.shape[0]

    @property
    def t_patches(self) -> int:
        return self.mask.shape[1]

    @property
    def masked_slots(self) -> int:
        return int(self.mask.sum())

    @property
    def masked_voxels(self) -> int:
        return self.masked_slots * self.voxels_per_patch * self.t_patch_len

    def flat(self) -> np.ndarray:
        """Patch-major flattening: slot index = p * t_patches + t."""
        return self.mask.reshape(-1)

    def to_lattice(self, grid_dims: tuple[int, int, int]) -> np.ndarray:
        """[Gx, Gy, Gz, T'] view of the mask under the x-fastest patch order."""
        gx, gy, gz = grid_dims
        if gx * gy * gz != self.n_patches:
            raise ValidationError("grid_dims inconsistent with mask size")
        return self.mask.reshape(gz, gy, gx, self.t_patches).transpose(2, 1, 0, 3)


def _sample(rng: np.random.Generator, candidates: np.ndarray, ratio: float) -> np.ndarray:
    k = int(np.ceil(ratio * len(candidates)))
    if k >= len(candidates):
        return candidates
    return rng.choice(candidates, size=k, replace=False)


def _window_blocks(grid_dims, block) -> list[np.ndarray]:
    """Partition the patch lattice into contiguous blocks of patch indices."""
    gx, gy, gz = grid_dims
    bx, by, bz = block
    blocks = []
    for z0 in range(0, gz, bz):
        for y0 in range(0, gy, by):
            for x0 in range(0, gx, bx):
                xs = np.arange(x0, min(x0 + bx, gx))
                ys = np.arange(y0, min(y0 + by, gy))
                zs = np.arange(z0, min(z0 + bz, gz))
                idx = (xs[:, None, None] + ys[None, :, None] * gx
                       + zs[None, None, :] * gx * gy)
                blocks.append(idx.reshape(-1))
    return blocks


def build_mask(spec: MaskSpec, sets: PatchSets, t_patches: int,
               t_patch_len: int = 1) -> MaskTensor:
    """Realize a mask spec on the patch lattice defined by ``sets.grid``."""
    if t_patches < 1:
        raise ValidationError("t_patches must be >= 1")
    n_patches = sets.grid.n_patches
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros((n_patches, t_patches), dtype=bool)

    if spec.strategy in _REGION_CRITERION:
        candidates = np.asarray(
            sets.patch_set(spec.region, _REGION_CRITERION[spec.strategy]),
            dtype=np.int64,
        )
        if len(candidates) == 0:
            raise ConfigurationError(
                f"region {spec.region!r} has no patches under "
                f"{_REGION_CRITERION[spec.strategy]}"
            )
        if spec.temporal_mode == TUBE:
            chosen = _sample(rng, candidates, spec.ratio)
            mask[chosen, :] = True
        else:
            for t in range(t_patches):
                mask[_sample(rng, candidates, spec.ratio), t] = True

    elif spec.strategy == RANDOM_RANDOM:
        slots = n_patches * t_patches
        chosen = _sample(rng, np.arange(slots), spec.ratio)
        mask.reshape(-1)[chosen] = True

    elif spec.strategy == RANDOM_TUBE:
        chosen = _sample(rng, np.arange(n_patches), spec.ratio)
        mask[chosen, :] = True

    elif spec.strategy == WINDOW_RANDOM:
        blocks = _window_blocks(sets.grid.grid_dims, spec.window_block)
        block_ids = np.arange(len(blocks))
        for t in range(t_patches):
            for b in _sample(rng, block_ids, spec.ratio):
                mask[blocks[int(b)], t] = True

    return MaskTensor(mask=mask, voxels_per_patch=sets.grid.voxels_per_patch,
                      t_patch_len=t_patch_len)


# ---------------------------------------------------------------------------
# Mask application on token matrices


def _flat_mask(mask) -> np.ndarray:
    if isinstance(mask, MaskTensor):
        return mask.flat()
    return np.asarray(mask, dtype=bool).reshape(-1)


def apply_mask(tokens, mask, mode: str, mask_token=None):
    """Apply a mask to a [N, D] token matrix.

    DROP returns (kept_tokens, kept_indices); the companion
    :func:`reinsert_tokens` rebuilds the full set. REPLACE_LEARNED swaps
    masked rows for a shared embedding and returns (tokens, None).
    ``tokens`` may be a numpy array or an autodiff tensor (anything with
    numpy-style arithmetic and a ``take_rows`` method).
    """
    m = _flat_mask(mask)
    n = tokens.shape[0]
    if m.shape[0] != n:
        raise ValidationError(f"mask covers {m.shape[0]} slots but tokens have {n} rows")

    if mode == DROP:
        kept = np.flatnonzero(~m)
        if hasattr(tokens, "take_rows"):
            return tokens.take_rows(kept), kept
        return tokens[kept], kept

    if mode == REPLACE_LEARNED:
        if mask_token is None:
            raise ValidationError("REPLACE_LEARNED needs a mask_token")
        w = m.astype(np.float32)[:, None]  # [N, 1]
        return tokens * (1.0 - w) + mask_token * w, None

    raise ValidationError(f"unknown mask application mode {mode!r}")


def reinsert_tokens(kept_tokens, kept_indices: np.ndarray, total: int, fill):
    """Scatter kept rows back to their original slots; ``fill`` pads the rest.

    numpy-only helper (decoder-side re-insertion of placeholder embeddings is
    done with tensor ops in the model).
    """
    kept_tokens = np.asarray(kept_tokens)
    out = np.broadcast_to(np.asarray(fill, dtype=kept_tokens.dtype),
                          (total, kept_tokens.shape[1])).copy()
    out[kept_indices] = kept_tokens
    return out


# ---------------------------------------------------------------------------
# Serialization


def save_mask(tensor: MaskTensor, spec: MaskSpec, path) -> None:
    """Write the mask as a packed bitset plus a JSON sidecar."""
    path = Path(path)
    bits = np.packbits(tensor.mask.reshape(-1))
    path.write_bytes(bits.tobytes())
    sidecar = {
        "shape": list(tensor.mask.shape),
        "masked_slots": tensor.masked_slots,
        "masked_voxels": tensor.masked_voxels,
        "voxels_per_patch": tensor.voxels_per_patch,
        "t_patch_len": tensor.t_patch_len,
        "spec": spec.to_dict(),
        "spec_hash": spec.digest(),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def load_mask(path) -> tuple[MaskTensor, MaskSpec]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    spec = MaskSpec.from_dict(sidecar["spec"])
    if spec.digest() != sidecar["spec_hash"]:
        raise ValidationError(f"spec hash mismatch in {path}")
    shape = tuple(sidecar["shape"])
    n = int(np.prod(shape))
    bits = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    mask = np.unpackbits(bits, count=n).reshape(shape).astype(bool)
    tensor = MaskTensor(mask=mask, voxels_per_patch=int(sidecar["voxels_per_patch"]),
                        t_patch_len=int(sidecar["t_patch_len"]))
    if tensor.masked_slots != sidecar["masked_slots"]:
        raise ValidationError(f"bit payload of {path} disagrees with its sidecar")
    return tensor, spec
