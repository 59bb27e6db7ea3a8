"""Index-sequence samplers for the four temporal transformations.

Every sampler is a pure function of the video length and an explicit
``numpy.random.Generator``; none of them touch global random state.
Each one returns an :class:`IndexSequence` of 16 source-frame positions.

    speed     rho + [0, 2^k, 2*2^k, ..., 15*2^k]
    random    rho + permutation([0..15])
    periodic  forward to a switch point s, then backward, sub-sampled by 2^k
    warp      rho + cumulative sums of 15 random gaps in [1, 8]
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

CLIP_LEN = 16
MAX_KAPPA = 3
MAX_SKIP = 7


class Tau(enum.IntEnum):
    SPEED = 0
    RANDOM = 1
    PERIODIC = 2
    WARP = 3


class InfeasibleVideoError(ValueError):
    """The video is too short for the requested transformation."""

    def __init__(self, video_length: int, required_length: int, what: str):
        self.video_length = video_length
        self.required_length = required_length
        super().__init__(
            f"{what} needs a video of at least {required_length} frames, got {video_length}"
        )


@dataclass(frozen=True)
class TransformSpec:
    tau: Tau
    kappa: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tau", Tau(self.tau))
        if not 0 <= self.kappa <= MAX_KAPPA:
            raise ValueError(f"kappa must be in 0..{MAX_KAPPA}, got {self.kappa}")
        if self.tau in (Tau.RANDOM, Tau.WARP) and self.kappa != 0:
            raise ValueError(f"{self.tau.name.lower()} is defined only for kappa=0")


@dataclass(frozen=True)
class IndexSequence:
    indices: tuple[int, ...]
    rho: int
    spec: TransformSpec
    params: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "tau": int(self.spec.tau),
            "kappa": self.spec.kappa,
            "rho": self.rho,
            "indices": list(self.indices),
            "params": dict(self.params),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json())

    @property
    def span(self) -> int:
        return max(self.indices) - min(self.indices)


def max_feasible_kappa(video_length: int) -> int:
    """Largest kappa with ``15 * 2**kappa + 1 <= video_length``, or -1."""
    if video_length < 1:
        raise ValueError("video_length must be positive")
    best = -1
    for kappa in range(MAX_KAPPA + 1):
        if (CLIP_LEN - 1) * 2**kappa + 1 <= video_length:
            best = kappa
    return best


def _require_kappa(video_length: int, kappa: int, what: str) -> None:
    if not 0 <= kappa <= MAX_KAPPA:
        raise ValueError(f"kappa must be in 0..{MAX_KAPPA}, got {kappa}")
    if kappa > max_feasible_kappa(video_length):
        raise InfeasibleVideoError(video_length, (CLIP_LEN - 1) * 2**kappa + 1, what)


def _uniform_start(rng: np.random.Generator, video_length: int, span: int) -> int:
    # span is max - min of the offsets; starts 0..L-1-span are feasible
    return int(rng.integers(0, video_length - span))


# -- speed -------------------------------------------------------------------


def speed_offsets(kappa: int) -> list[int]:
    return [j * 2**kappa for j in range(CLIP_LEN)]


def sample_speed(video_length: int, kappa: int, rng: np.random.Generator | None = None,
                 rho: int | None = None) -> IndexSequence:
    _require_kappa(video_length, kappa, f"speed {kappa}")
    span = (CLIP_LEN - 1) * 2**kappa
    if rho is None:
        rho = _uniform_start(rng, video_length, span)
    elif not 0 <= rho <= video_length - 1 - span:
        raise ValueError(f"rho={rho} out of range for speed {kappa} at length {video_length}")
    indices = tuple(rho + o for o in speed_offsets(kappa))
    return IndexSequence(indices, rho, TransformSpec(Tau.SPEED, kappa))


# -- random ------------------------------------------------------------------


def sample_random(video_length: int, rng: np.random.Generator | None = None,
                  rho: int | None = None, permutation=None) -> IndexSequence:
    """Random permutation of 16 consecutive frames; the identity is re-drawn."""
    if video_length < CLIP_LEN:
        raise InfeasibleVideoError(video_length, CLIP_LEN, "random")
    if rho is None:
        rho = _uniform_start(rng, video_length, CLIP_LEN - 1)
    if permutation is None:
        identity = np.arange(CLIP_LEN)
        while True:
            perm = rng.permutation(CLIP_LEN)
            if not np.array_equal(perm, identity):
                break
    else:
        perm = np.asarray(permutation)
        if sorted(perm.tolist()) != list(range(CLIP_LEN)):
            raise ValueError("permutation must reorder 0..15")
    indices = tuple(int(rho + p) for p in perm)
    return IndexSequence(indices, int(rho), TransformSpec(Tau.RANDOM, 0),
                         {"permutation": [int(p) for p in perm]})


# -- periodic ----------------------------------------------------------------


def switch_point_range(kappa: int) -> range:
    """Valid switch points s with ``2*2^k < s < 13*2^k``."""
    step = 2**kappa
    return range(2 * step + 1, 13 * step)


def periodic_offsets(kappa: int, s: int) -> tuple[list[int], int]:
    """Closed-form periodic offsets (minimum pinned to 0) and ``rho_min``.

    With ``sb = s // 2^k`` and ``delta = s - sb * 2^k`` the unshifted pattern
    is ``[0, 2^k, ..., sb*2^k, (sb-1)*2^k + delta, ..., (2*sb-15)*2^k + delta]``.
    """
    step = 2**kappa
    if s not in switch_point_range(kappa):
        raise ValueError(f"switch point s={s} outside ({2 * step}, {13 * step})")
    sb, delta = divmod(s, step)
    forward = [j * step for j in range(sb + 1)]
    backward = [j * step + delta for j in range(sb - 1, 2 * sb - CLIP_LEN, -1)]
    rho_min = max(0, (CLIP_LEN - 1 - 2 * sb) * step - delta)
    return [rho_min + v for v in forward + backward], rho_min


def sample_periodic(video_length: int, kappa: int, rng: np.random.Generator | None = None,
                    s: int | None = None, extra_offset: int | None = None) -> IndexSequence:
    _require_kappa(video_length, kappa, f"periodic {kappa}")
    if s is None:
        r = switch_point_range(kappa)
        s = int(rng.integers(r.start, r.stop))
    offsets, rho_min = periodic_offsets(kappa, s)
    room = video_length - 1 - max(offsets)
    if extra_offset is None:
        extra_offset = int(rng.integers(0, room + 1))
    elif not 0 <= extra_offset <= room:
        raise ValueError(f"extra offset {extra_offset} exceeds room {room}")
    rho = rho_min + extra_offset
    indices = tuple(extra_offset + o for o in offsets)
    params = {"s": s, "s_bar": s // 2**kappa, "delta": s % 2**kappa,
              "rho_min": rho_min, "extra_offset": extra_offset}
    return IndexSequence(indices, rho, TransformSpec(Tau.PERIODIC, kappa), params)


# -- warp --------------------------------------------------------------------


def warp_max_skip(video_length: int) -> int:
    """Largest skip value that always fits 15 gaps into the video."""
    if video_length < CLIP_LEN:
        raise InfeasibleVideoError(video_length, CLIP_LEN, "warp")
    return min(MAX_SKIP, (video_length - 1) // (CLIP_LEN - 1) - 1)


def sample_warp(video_length: int, rng: np.random.Generator | None = None,
                skips=None, rho: int | None = None) -> IndexSequence:
    """Strictly increasing indices with i.i.d. gaps ``skip + 1``.

    Skips are uniform on ``{0..7}`` once the video has at least 121 frames;
    shorter videos clip the support so 15 gaps always fit.
    """
    top = warp_max_skip(video_length)
    if skips is None:
        skips = rng.integers(0, top + 1, size=CLIP_LEN - 1)
    skips = [int(x) for x in skips]
    if len(skips) != CLIP_LEN - 1 or any(not 0 <= x <= MAX_SKIP for x in skips):
        raise ValueError("warp needs 15 skips in 0..7")
    offsets = np.concatenate([[0], np.cumsum(np.asarray(skips) + 1)]).tolist()
    span = offsets[-1]
    if span + 1 > video_length:
        raise InfeasibleVideoError(video_length, span + 1, "warp")
    if rho is None:
        rho = _uniform_start(rng, video_length, span)
    elif not 0 <= rho <= video_length - 1 - span:
        raise ValueError(f"rho={rho} out of range for this warp")
    indices = tuple(int(rho + o) for o in offsets)
    return IndexSequence(indices, int(rho), TransformSpec(Tau.WARP, 0), {"skips": skips})


def sample(tau: Tau | int, video_length: int, kappa: int, rng: np.random.Generator) -> IndexSequence:
    tau = Tau(tau)
    if tau is Tau.SPEED:
        return sample_speed(video_length, kappa, rng)
    if tau is Tau.RANDOM:
        return sample_random(video_length, rng)
    if tau is Tau.PERIODIC:
        return sample_periodic(video_length, kappa, rng)
    return sample_warp(video_length, rng)


# -- validation --------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    reason: str = ""


@dataclass
class ValidationReport:
    checks: list[Check]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def __str__(self) -> str:
        return "\n".join(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.reason}" for c in self.checks)


def validate(seq: IndexSequence, video_length: int) -> ValidationReport:
    """Check every invariant of ``seq`` against a video of ``video_length`` frames."""
    idx = list(seq.indices)
    tau, kappa = seq.spec.tau, seq.spec.kappa
    checks = []

    checks.append(Check("length", len(idx) == CLIP_LEN,
                        "ok" if len(idx) == CLIP_LEN else f"expected 16 indices, got {len(idx)}"))
    bad = [i for i in idx if i < 0 or i >= video_length]
    checks.append(Check("range", not bad,
                        "ok" if not bad else f"out of range: {bad} not in [0, {video_length})"))
    kappa_ok = 0 <= kappa <= MAX_KAPPA and (tau not in (Tau.RANDOM, Tau.WARP) or kappa == 0)
    checks.append(Check("kappa", kappa_ok, "ok" if kappa_ok else f"kappa {kappa} invalid for {tau.name}"))

    gaps = np.diff(idx).tolist() if len(idx) > 1 else []
    if tau is Tau.SPEED:
        ok = all(g == 2**kappa for g in gaps)
        checks.append(Check("speed-gaps", ok, "ok" if ok else f"non-constant gap: {gaps}"))
        ok = bool(idx) and idx[0] == seq.rho
        checks.append(Check("rho", ok, "ok" if ok else f"first index {idx[:1]} != rho {seq.rho}"))
    elif tau is Tau.RANDOM:
        ok = sorted(idx) == list(range(seq.rho, seq.rho + CLIP_LEN))
        checks.append(Check("permutation", ok,
                            "ok" if ok else f"not a permutation of {seq.rho}..{seq.rho + CLIP_LEN - 1}"))
    elif tau is Tau.WARP:
        ok = all(1 <= g <= MAX_SKIP + 1 for g in gaps)
        checks.append(Check("warp-gaps", ok, "ok" if ok else f"gaps outside [1, 8]: {gaps}"))
    elif tau is Tau.PERIODIC:
        s = seq.params.get("s")
        try:
            offsets, rho_min = periodic_offsets(kappa, s)
            extra = seq.rho - rho_min
            ok = extra >= 0 and idx == [extra + o for o in offsets]
            reason = "ok" if ok else f"indices differ from closed form for kappa={kappa}, s={s}"
        except (TypeError, ValueError) as err:
            ok, reason = False, f"bad switch point: {err}"
        checks.append(Check("periodic-form", ok, reason))
    return ValidationReport(checks)
