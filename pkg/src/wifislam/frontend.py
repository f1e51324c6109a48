"""Synthetic visual frontend: bag-of-words appearances, frame matching, and
the inverted index used by the ORB-style policy.

Pixels are out of scope; a frame's appearance is a multiset of visual-word
ids drawn from the scene template of the corridor it was taken in. Matching
degrades the shared-word count with a deterministic seeded dropout (features
randomly absent from individual frames) and gates transform estimation on
true geometric separation. Two *distant* frames that share a scene template
are perceptual aliases: matching succeeds and returns the transform implied
by the shared appearance, which is how false loop closures enter the graph.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np

from .posegraph import Pose2, between


@dataclass(frozen=True)
class Appearance:
    """Visual words of one frame; the template id is simulation metadata and
    must stay invisible to candidate-selection policies."""

    words: tuple[int, ...]
    place_template: int


@dataclass(frozen=True)
class MatchParams:
    min_matches: int
    inlier_distance: float
    dropout_keep: float = 0.8
    noise_xy: float = 0.05
    noise_theta: float = 0.01

    def __post_init__(self) -> None:
        if self.min_matches <= 0 or self.inlier_distance <= 0:
            raise ValueError("match params must be positive")
        if not 0 < self.dropout_keep <= 1:
            raise ValueError("dropout_keep must be in (0, 1]")


@dataclass(frozen=True)
class MatchResult:
    num_matches: int
    relative: Pose2 | None
    accepted: bool


@dataclass(frozen=True)
class FrameTruth:
    """Simulator-side truth backing transform estimation for one frame."""

    gt_pose: Pose2
    template_pose: Pose2  # gt pose expressed in the frame's scene-template frame


def match_information(params: MatchParams) -> np.ndarray:
    """Information matrix for accepted matches: inverse of the injected noise covariance."""
    return np.diag(
        [1.0 / params.noise_xy**2, 1.0 / params.noise_xy**2, 1.0 / params.noise_theta**2]
    )


@lru_cache(maxsize=8192)
def _word_counts(words: tuple[int, ...]) -> dict[int, int]:
    return dict(Counter(words))


def shared_word_count(a: Appearance, b: Appearance) -> int:
    """Multiset intersection size of the two word bags."""
    ca, cb = _word_counts(a.words), _word_counts(b.words)
    if len(cb) < len(ca):
        ca, cb = cb, ca
    return sum(n if n <= cb[w] else cb[w] for w, n in ca.items() if w in cb)


def match_frames(
    a_id: int,
    b_id: int,
    a: Appearance,
    b: Appearance,
    truth_a: FrameTruth,
    truth_b: FrameTruth,
    params: MatchParams,
    seed: int,
) -> MatchResult:
    """Match two frames; returns the relative pose of b in a's frame when accepted.

    The shared-word count is thinned by an independent per-word dropout
    seeded from (seed, frame ids), so results are reproducible per pair.
    Acceptance requires num_matches >= min_matches; transform estimation then
    succeeds with the true relative pose when the frames are geometrically
    within inlier_distance, succeeds with the alias-implied (false) pose when
    distant frames share a scene template, and fails otherwise.
    """
    shared = shared_word_count(a, b)
    rng = np.random.default_rng((seed, a_id, b_id))
    num = int(rng.binomial(shared, params.dropout_keep)) if shared else 0
    if num < params.min_matches:
        return MatchResult(num_matches=num, relative=None, accepted=False)

    dx = truth_a.gt_pose.x - truth_b.gt_pose.x
    dy = truth_a.gt_pose.y - truth_b.gt_pose.y
    separation = (dx * dx + dy * dy) ** 0.5
    if separation <= params.inlier_distance:
        rel = between(truth_a.gt_pose, truth_b.gt_pose)
    elif a.place_template == b.place_template:
        rel = between(truth_a.template_pose, truth_b.template_pose)
    else:
        # enough matched words but no feasible transform: RANSAC-style rejection
        return MatchResult(num_matches=num, relative=None, accepted=False)
    nx, ny, nth = rng.normal(0.0, 1.0, size=3)
    noisy = Pose2(
        rel.x + params.noise_xy * nx,
        rel.y + params.noise_xy * ny,
        rel.theta + params.noise_theta * nth,
    )
    return MatchResult(num_matches=num, relative=noisy, accepted=True)


class InvertedIndex:
    """word id -> keyframes observing it; queries rank by shared-word count."""

    def __init__(self) -> None:
        # per word: list of (keyframe, multiplicity) in insertion order
        self._postings: dict[int, list[tuple[int, int]]] = {}
        self._appearances: dict[int, Appearance] = {}

    def __len__(self) -> int:
        return len(self._appearances)

    def __contains__(self, keyframe_id: int) -> bool:
        return keyframe_id in self._appearances

    def keyframes(self) -> list[int]:
        return sorted(self._appearances)

    def appearance_of(self, keyframe_id: int) -> Appearance:
        return self._appearances[keyframe_id]

    def insert(self, keyframe_id: int, appearance: Appearance) -> None:
        if not appearance.words:
            raise ValueError("keyframes must carry a non-empty word bag")
        if keyframe_id in self._appearances:
            raise ValueError(f"keyframe {keyframe_id} already indexed")
        self._appearances[keyframe_id] = appearance
        for w, n in _word_counts(appearance.words).items():
            self._postings.setdefault(w, []).append((keyframe_id, n))

    def query_scored(self, appearance: Appearance) -> list[tuple[int, int]]:
        """(keyframe, multiset shared-word count) sharing at least one word,
        ordered by count desc then id asc."""
        counts: dict[int, int] = {}
        for w, qn in _word_counts(appearance.words).items():
            for kf, n in self._postings.get(w, ()):
                counts[kf] = counts.get(kf, 0) + (qn if qn <= n else n)
        scored = sorted(counts.items(), key=lambda e: (-e[1], e[0]))
        return scored

    def query(self, appearance: Appearance) -> list[int]:
        """Keyframes sharing at least one word, by shared count desc then id asc."""
        return [kf for kf, _n in self.query_scored(appearance)]


def index_insert(index: InvertedIndex, keyframe_id: int, appearance: Appearance) -> None:
    index.insert(keyframe_id, appearance)


def index_query(index: InvertedIndex, appearance: Appearance) -> list[int]:
    return index.query(appearance)


class Covisibility:
    """Symmetric co-visibility links between keyframes with accepted matches."""

    def __init__(self) -> None:
        self._links: dict[int, set[int]] = {}

    def neighbors(self, keyframe_id: int) -> set[int]:
        return set(self._links.get(keyframe_id, ()))

    def items(self) -> dict[int, set[int]]:
        return {k: set(v) for k, v in self._links.items()}


def covis_update(covis: Covisibility, new_keyframe: int, accepted_matches: Iterable[int]) -> Covisibility:
    for m in accepted_matches:
        covis._links.setdefault(new_keyframe, set()).add(m)
        covis._links.setdefault(m, set()).add(new_keyframe)
    return covis
