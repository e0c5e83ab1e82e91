from collections import defaultdict

from hypothesis import given, settings, strategies as st

from sfmsplat.synthscene import NoiseSpec, corrupt_observations, generate_scene
from sfmsplat.tracks import Observation, Track, UnionFind, build_tracks, merge_tracks
from sfmsplat.viewgraph import PairMatches


def pm(a, b, pairs):
    """PairMatches from a list of (kp_a, kp_b); pixels encode the keypoint for traceability."""
    ka = [p[0] for p in pairs]
    kb = [p[1] for p in pairs]
    return PairMatches(a, b, [[k, 0] for k in ka], [[k, 0] for k in kb], ka, kb)


def partition(tracks):
    return sorted(tuple(sorted((o.image, o.keypoint) for o in t.observations)) for t in tracks)


def test_transitive_chain():
    tracks = build_tracks([pm(0, 1, [(1, 2)]), pm(1, 2, [(2, 3)])])
    assert partition(tracks) == [((0, 1), (1, 2), (2, 3))]


def test_duplicate_in_one_image_keeps_single_observation():
    tracks = build_tracks([pm(0, 1, [(1, 2), (4, 2)])])
    assert len(tracks) == 1
    imgs = [o.image for o in tracks[0].observations]
    assert imgs == [0, 1]
    # equal support: the lower keypoint id wins
    assert tracks[0].observations[0].keypoint == 1


def test_duplicate_prefers_better_supported_keypoint():
    # keypoint 4 of image 0 has two matches, keypoint 1 only one
    tracks = build_tracks([pm(0, 1, [(1, 2), (4, 2)]), pm(0, 2, [(4, 7)])])
    obs = {o.image: o.keypoint for o in tracks[0].observations}
    assert obs == {0: 4, 1: 2, 2: 7}


def test_min_observations_filter():
    ms = [pm(0, 1, [(1, 1), (2, 2)]), pm(1, 2, [(2, 2)])]
    assert len(build_tracks(ms, min_observations=2)) == 2
    assert partition(build_tracks(ms, min_observations=3)) == [((0, 2), (1, 2), (2, 2))]


def test_noise_free_scene_recovers_ground_truth_tracks():
    s = generate_scene(10, 200, "orbit", seed=5)
    tracks = build_tracks(corrupt_observations(s, NoiseSpec()).values())
    assert partition(tracks) == partition(s.tracks)


def test_union_find_groups():
    uf = UnionFind()
    uf.union((0, 1), (1, 1))
    uf.union((2, 5), (3, 5))
    uf.union((1, 1), (3, 5))
    uf.add((4, 0))
    groups = sorted(sorted(g) for g in uf.groups().values())
    assert groups == [[(0, 1), (1, 1), (2, 5), (3, 5)], [(4, 0)]]


def _closure_reference(matches):
    """Brute-force transitive closure plus the documented duplicate rule."""
    adj = defaultdict(set)
    degree = defaultdict(int)
    for m in matches:
        for ka, kb in zip(m.kp_a.tolist(), m.kp_b.tolist()):
            a, b = (m.image_a, ka), (m.image_b, kb)
            adj[a].add(b)
            adj[b].add(a)
            degree[a] += 1
            degree[b] += 1
    seen, comps = set(), []
    for start in sorted(adj):
        if start in seen:
            continue
        comp, stack = [], [start]
        seen.add(start)
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        best = {}
        for node in comp:
            cur = best.get(node[0])
            if cur is None or degree[node] > degree[cur] or (degree[node] == degree[cur] and node[1] < cur[1]):
                best[node[0]] = node
        if len(best) >= 2:
            comps.append(tuple(sorted(best.values())))
    return sorted(comps)


match_lists = st.lists(
    st.tuples(st.integers(0, 4), st.integers(0, 4), st.integers(0, 5), st.integers(0, 5)).filter(lambda r: r[0] != r[1]),
    min_size=1,
    max_size=25,
)


@given(match_lists)
@settings(max_examples=200, deadline=None)
def test_partition_matches_brute_force_closure(rows):
    groups = defaultdict(list)
    for a, b, ka, kb in rows:
        groups[(a, b)].append((ka, kb))
    matches = [pm(a, b, v) for (a, b), v in sorted(groups.items())]
    tracks = build_tracks(matches)
    assert partition(tracks) == _closure_reference(matches)
    keys = [(o.image, o.keypoint) for t in tracks for o in t.observations]
    assert len(keys) == len(set(keys))
    for t in tracks:
        assert len(t.images) == len(set(t.images)) >= 2


def _scene_cameras(s):
    return {i: c for i, c in enumerate(s.cameras)}


def test_split_track_is_merged_back():
    s = generate_scene(10, 100, "orbit", seed=2)
    gt = max(s.tracks, key=len)
    assert len(gt) >= 4
    half = len(gt) // 2
    a = Track(0, gt.copy().observations[:half], gt.point.copy())
    b = Track(1, gt.copy().observations[half:], gt.point + 1e-4)
    other = Track(2, s.tracks[0].copy().observations, s.tracks[0].point.copy())
    out = merge_tracks([a, b, other], _scene_cameras(s))
    assert len(out) == 2
    assert partition(out[:1]) == partition([gt])


def test_distant_tracks_unchanged_and_idempotent():
    s = generate_scene(10, 100, "orbit", seed=2)
    tracks = [t.copy() for t in s.tracks[:30]]
    cams = _scene_cameras(s)
    once = merge_tracks(tracks, cams)
    assert partition(once) == partition(tracks)
    twice = merge_tracks(once, cams)
    assert partition(twice) == partition(once)


def test_merge_is_idempotent_after_merging():
    s = generate_scene(10, 100, "orbit", seed=3)
    pieces = []
    for t in s.tracks[:20]:
        h = len(t) // 2
        pieces.append(Track(len(pieces), t.copy().observations[:h], t.point.copy()))
        pieces.append(Track(len(pieces), t.copy().observations[h:], t.point.copy()))
    cams = _scene_cameras(s)
    once = merge_tracks(pieces, cams)
    assert partition(once) == partition(s.tracks[:20])
    assert partition(merge_tracks(once, cams)) == partition(once)


def test_observation_coerces_pixels():
    o = Observation(3, [1, 2], 7)
    assert o.uv.dtype == float and o.uv.shape == (2,)
