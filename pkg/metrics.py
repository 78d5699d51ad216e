"""Navigation and retrieval metrics computed from episode traces."""

import math

import numpy as np

from scene import SUCCESS_RADIUS

NAV_KEYS = ('TL', 'NE', 'SR', 'SPL', 'nDTW')
RETRIEVAL_KEYS = ('OA', 'OR', 'HA', 'HR')
EPISODE_COLUMNS = ('row_type', 'mode', 'seed', 'scene', 'tour', 'episode', 'position',
                   'TL', 'NE', 'SR', 'SPL', 'nDTW', 'OA', 'OR', 'HA', 'HR', 'T-nDTW')
T_NDTW_AGGREGATIONS = ('concat', 'geometric')


def dtw_distance(sequence, reference, dist):
    """Accumulated dynamic-time-warping cost between two sequences."""
    rows, cols = len(sequence), len(reference)
    if rows == 0 or cols == 0:
        raise ValueError("DTW needs two non-empty sequences")
    cost = np.full((rows + 1, cols + 1), np.inf)
    cost[0, 0] = 0.0
    for i in range(1, rows + 1):
        for j in range(1, cols + 1):
            step = dist(sequence[i - 1], reference[j - 1])
            cost[i, j] = step + min(cost[i - 1, j], cost[i, j - 1], cost[i - 1, j - 1])
    return float(cost[rows, cols])


def ndtw(path, reference, scene):
    """exp(-DTW / (|reference| * success radius)) with geodesic point distances."""
    total = dtw_distance(path, reference, scene.distance)
    return math.exp(-total / (len(reference) * SUCCESS_RADIUS))


def nav_metrics(trace, episode, scene):
    """TL, NE, SR, SPL and nDTW of one executed path."""
    path = list(trace.path)
    if not path or path[0] != episode.start:
        raise ValueError(f"trace of episode {episode.episode_id} does not start at {episode.start}")
    trajectory_length = scene.path_length(path)
    error = scene.distance(path[-1], episode.goal)
    success = 1.0 if error < SUCCESS_RADIUS else 0.0
    shortest = scene.distance(episode.start, episode.goal)
    spl = success * shortest / max(shortest, trajectory_length) if shortest > 0 else success
    return {
        'TL': trajectory_length,
        'NE': error,
        'SR': success,
        'SPL': spl,
        'nDTW': ndtw(path, list(episode.teacher_path), scene),
    }


def tour_ndtw(traces, episodes, scene, aggregation='concat'):
    """Tour-level nDTW: over concatenated paths, or the geometric mean of episode nDTW."""
    if len(traces) != len(episodes):
        raise ValueError(f"{len(traces)} traces for {len(episodes)} episodes")
    if not episodes:
        raise ValueError("a tour needs at least one episode")
    if aggregation == 'concat':
        path = [v for trace in traces for v in trace.path]
        reference = [v for episode in episodes for v in episode.teacher_path]
        return ndtw(path, reference, scene)
    if aggregation == 'geometric':
        values = [ndtw(list(t.path), list(e.teacher_path), scene) for t, e in zip(traces, episodes)]
        return float(math.exp(np.mean(np.log(values))))
    raise ValueError(f"unknown T-nDTW aggregation {aggregation!r}")


def _ratio(numerator, denominator):
    return 1.0 if denominator == 0 else numerator / denominator


def retrieval_metrics(trace, episode):
    """OA, OR, HA and HR over one episode.

    Each step must log the retrieved observation viewpoints, the observation
    ring (persistent-graph viewpoints within the horizon that the bank holds)
    and the retrieved history patterns with their traced viewpoints and the
    remainder of the past episode.
    """
    teacher = set(episode.teacher_path)
    retrieved_union, truth_union, correct = set(), set(), set()
    hits = 0
    traced_total = 0
    truth_total = 0
    for step in trace.steps:
        for name in ('retrieved_observations', 'observation_ring', 'retrieved_histories'):
            if not hasattr(step, name):
                raise ValueError(f"step {getattr(step, 'step', '?')} is missing the {name} log")
        retrieved = set(step.retrieved_observations)
        truth = set(step.observation_ring) & teacher
        retrieved_union |= retrieved
        truth_union |= truth
        correct |= retrieved & truth

        seen = set()
        for pattern in step.retrieved_histories:
            key = (pattern['episode_id'], pattern['step'])
            if key in seen:
                continue
            seen.add(key)
            traced = set(pattern['viewpoints'])
            truth = set(pattern['remainder']) & teacher
            hits += len(traced & truth)
            traced_total += len(traced)
            truth_total += len(truth)
    return {
        'OA': _ratio(len(correct), len(retrieved_union)),
        'OR': _ratio(len(correct), len(truth_union)),
        'HA': _ratio(hits, traced_total),
        'HR': _ratio(hits, truth_total),
    }


def progress_bins(position, n_episodes, bins=10):
    """Tour-progress bin (0-based) of the episode at ``position``."""
    return min(bins - 1, position * bins // max(1, n_episodes))


def progress_curve(rows, key, bins=10):
    """Mean of ``key`` per progress bin over episode rows."""
    sums = np.zeros(bins)
    counts = np.zeros(bins)
    for row in rows:
        b = progress_bins(row['position'], row['n_episodes'], bins)
        sums[b] += row[key]
        counts[b] += 1
    with np.errstate(invalid='ignore', divide='ignore'):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def quartile_means(rows, key):
    """Mean of ``key`` over the first and the last quarter of tour progress."""
    first = [r[key] for r in rows if r['position'] * 4 < r['n_episodes']]
    last = [r[key] for r in rows if r['position'] * 4 >= 3 * r['n_episodes']]
    return (float(np.mean(first)) if first else float('nan'),
            float(np.mean(last)) if last else float('nan'))
