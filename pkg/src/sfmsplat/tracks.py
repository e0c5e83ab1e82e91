"""Multi-view feature tracks: union-find over pairwise inlier matches, and proximity merging."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geomcore import project_points


@dataclass
class Observation:
    image: int
    uv: np.ndarray
    keypoint: int

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=float).reshape(2)


@dataclass
class Track:
    id: int
    observations: list[Observation]
    point: np.ndarray | None = None
    color: np.ndarray | None = None

    def __len__(self):
        return len(self.observations)

    @property
    def images(self) -> list[int]:
        return [o.image for o in self.observations]

    def keys(self) -> set[tuple[int, int]]:
        return {(o.image, o.keypoint) for o in self.observations}

    def copy(self) -> "Track":
        return Track(
            self.id,
            [Observation(o.image, o.uv.copy(), o.keypoint) for o in self.observations],
            None if self.point is None else np.array(self.point, dtype=float),
            None if self.color is None else np.array(self.color, dtype=float),
        )


class UnionFind:
    """Disjoint sets over hashable keys with path halving and union by size."""

    def __init__(self):
        self.parent = {}
        self.size = {}

    def add(self, x):
        if x not in self.parent:
            self.parent[x] = x
            self.size[x] = 1

    def find(self, x):
        parent = self.parent
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(self, a, b):
        self.add(a)
        self.add(b)
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        # deterministic: larger set wins, then the smaller key
        if (self.size[ra], -_order(ra)) < (self.size[rb], -_order(rb)):
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra

    def groups(self) -> dict:
        out = defaultdict(list)
        for x in self.parent:
            out[self.find(x)].append(x)
        return out


def _order(key):
    # keys are (image, keypoint) tuples; map to a sortable scalar for tie-breaks
    return key[0] * (1 << 32) + key[1] if isinstance(key, tuple) else key


def build_tracks(pair_matches, min_observations: int = 2) -> list[Track]:
    """Connected components of the (image, keypoint) match graph.

    ``pair_matches`` is an iterable of objects with ``image_a, image_b, kp_a, kp_b,
    pts_a, pts_b`` (arrays), typically the inlier matches of every view-graph edge.
    When a component holds two keypoints of the same image, the one with more
    incident inlier matches is kept (lower keypoint id on ties) and the other is
    dropped.
    """
    uf = UnionFind()
    degree = defaultdict(int)
    pixel = {}
    for m in pair_matches:
        a, b = int(m.image_a), int(m.image_b)
        for ka, kb, pa, pb in zip(m.kp_a.tolist(), m.kp_b.tolist(), m.pts_a, m.pts_b):
            na, nb = (a, ka), (b, kb)
            uf.union(na, nb)
            degree[na] += 1
            degree[nb] += 1
            pixel.setdefault(na, pa)
            pixel.setdefault(nb, pb)

    tracks = []
    for members in uf.groups().values():
        best = {}
        for node in members:
            img, kp = node
            cur = best.get(img)
            if cur is None or (degree[node], -kp) > (degree[cur], -cur[1]):
                best[img] = node
        if len(best) < min_observations:
            continue
        obs = [Observation(img, pixel[node], node[1]) for img, node in sorted(best.items())]
        tracks.append(obs)
    # stable ordering: by first (image, keypoint)
    tracks.sort(key=lambda obs: (obs[0].image, obs[0].keypoint))
    return [Track(i, obs) for i, obs in enumerate(tracks)]


def _reprojects_within(track_point, other: Track, cameras, merge_px) -> bool:
    for o in other.observations:
        K, T = cameras[o.image]
        uv, z = project_points(K, T, track_point)
        if not np.isfinite(uv[0, 0]) or np.linalg.norm(uv[0] - o.uv) > merge_px:
            return False
    return True


def merge_tracks(tracks: list[Track], cameras, merge_px: float = 2.0, merge_dist: float = 0.01) -> list[Track]:
    """Merge triangulated tracks that describe the same 3D point.

    Two tracks merge when their points are closer than ``merge_dist`` and each
    point reprojects within ``merge_px`` of every observation of the other. The
    merged track keeps the point of the longer track (lower id on ties) and, in
    images seen by both, that track's observation. Merging repeats until nothing
    changes, so the operation is idempotent.
    """
    tracks = [t.copy() for t in tracks]
    while True:
        with_points = [i for i, t in enumerate(tracks) if t.point is not None]
        if len(with_points) < 2:
            return tracks
        pts = np.array([tracks[i].point for i in with_points])
        pairs = sorted(cKDTree(pts).query_pairs(merge_dist))
        absorbed = set()
        changed = False
        for ia, ib in pairs:
            a, b = with_points[ia], with_points[ib]
            if a in absorbed or b in absorbed:
                continue
            ta, tb = tracks[a], tracks[b]
            if (len(tb), -tb.id) > (len(ta), -ta.id):
                ta, tb = tb, ta
                a, b = b, a
            if not (
                _reprojects_within(ta.point, tb, cameras, merge_px)
                and _reprojects_within(tb.point, ta, cameras, merge_px)
            ):
                continue
            seen = set(ta.images)
            ta.observations = sorted(
                ta.observations + [o for o in tb.observations if o.image not in seen], key=lambda o: o.image
            )
            absorbed.add(b)
            changed = True
        if not changed:
            return tracks
        tracks = [t for i, t in enumerate(tracks) if i not in absorbed]
