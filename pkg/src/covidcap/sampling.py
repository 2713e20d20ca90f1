"""Epoch samplers: plain uniform shuffling and the size-balanced two-stage
sampler that oversamples under-represented infection-size groups."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import ClassLabel, SamplingGroup, assign_sampling_group

# Fixed group order used by weight/probability vectors.
GROUP_ORDER = (
    SamplingGroup.COVID_SMALL,
    SamplingGroup.COVID_LARGE,
    SamplingGroup.CAP_SMALL,
    SamplingGroup.CAP_LARGE,
)


@dataclass(frozen=True)
class GroupCounts:
    """Sizes of the four sampling groups in a training split."""

    n_covid_small: int
    n_covid_large: int
    n_cap_small: int
    n_cap_large: int

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if int(value) < 0:
                raise ValueError(f"{name} must be nonnegative, got {value}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n_covid_small, self.n_covid_large, self.n_cap_small, self.n_cap_large)

    @classmethod
    def from_groups(cls, groups: Mapping[SamplingGroup, Sequence[int]]) -> "GroupCounts":
        return cls(*(len(groups.get(g, ())) for g in GROUP_ORDER))


@dataclass(frozen=True)
class SamplerProbabilities:
    """Group weights and normalized draw probabilities, in GROUP_ORDER."""

    weights: tuple[float, float, float, float]
    probabilities: tuple[float, float, float, float]

    @property
    def weight_sum(self) -> float:
        return float(sum(self.weights))


def uniform_epoch(n: int, seed: int) -> np.ndarray:
    """A seeded permutation of range(n): every index exactly once."""
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    return np.random.default_rng(seed).permutation(n)


def group_indices(
    labels: Sequence[ClassLabel], ratios: Sequence[float]
) -> dict[SamplingGroup, list[int]]:
    """Bucket dataset indices into the four sampling groups."""
    if len(labels) != len(ratios):
        raise ValueError(f"{len(labels)} labels vs {len(ratios)} ratios")
    out: dict[SamplingGroup, list[int]] = {g: [] for g in GROUP_ORDER}
    for i, (label, ratio) in enumerate(zip(labels, ratios)):
        out[assign_sampling_group(label, ratio)].append(i)
    return out


def size_balanced_probabilities(counts: GroupCounts | Sequence[int]) -> SamplerProbabilities:
    """Group draw probabilities from the four group sizes (GROUP_ORDER).

    Small-infection COVID is upweighted by the large/small COVID count ratio
    and large-infection CAP by the small/large CAP count ratio (the two
    majority groups keep weight 1); probabilities normalize the weights by
    their sum.  Every group must be non-empty.
    """
    if isinstance(counts, GroupCounts):
        counts = counts.as_tuple()
    if len(counts) != 4:
        raise ValueError(f"expected 4 group counts, got {len(counts)}")
    n_cs, n_cl, n_caps, n_capl = (int(c) for c in counts)
    for group, count in zip(GROUP_ORDER, (n_cs, n_cl, n_caps, n_capl)):
        if count < 1:
            raise ValueError(f"sampling group {group.value} is empty")
    weights = (n_cl / n_cs, 1.0, 1.0, n_caps / n_capl)
    total = sum(weights)
    return SamplerProbabilities(
        weights=weights, probabilities=tuple(w / total for w in weights)
    )


def draw_size_balanced(
    groups: Mapping[SamplingGroup, Sequence[int]],
    probs: SamplerProbabilities,
    rng: np.random.Generator,
) -> int:
    """One two-stage draw: pick a group by probability, then a member uniformly."""
    g = GROUP_ORDER[rng.choice(len(GROUP_ORDER), p=np.asarray(probs.probabilities))]
    members = groups[g]
    if len(members) == 0:
        raise ValueError(f"sampling group {g.value} is empty")
    return int(members[rng.integers(len(members))])


def size_balanced_epoch(
    groups: Mapping[SamplingGroup, Sequence[int]],
    probs: SamplerProbabilities,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """n independent size-balanced draws (with replacement)."""
    if n < 1:
        raise ValueError(f"need at least one draw, got n={n}")
    return np.array([draw_size_balanced(groups, probs, rng) for _ in range(n)], dtype=np.int64)
