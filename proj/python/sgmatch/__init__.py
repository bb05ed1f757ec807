"""Scene graph matching: floor-plan generation, a GATv2 encoder with Sinkhorn
assignment, training and evaluation.

Graphs, weights and reports are plain dicts in the same JSON layout the
``sgm`` command-line tool reads and writes.
"""

import json

import numpy as np

from . import _core
from ._core import InputError, RuntimeFailure, __version__

__all__ = [
    "InputError",
    "RuntimeFailure",
    "__version__",
    "augment_edges",
    "evaluate",
    "generate_corpus",
    "generate_floorplan",
    "hungarian",
    "match",
    "perturb",
    "score",
    "sinkhorn",
    "train",
]


def _dump(obj):
    return obj if isinstance(obj, str) else json.dumps(obj)


def generate_floorplan(rooms_min=5, rooms_max=10, room_size_min=3.0, room_size_max=6.0, seed=0):
    return json.loads(_core.generate_floorplan(rooms_min, rooms_max, room_size_min, room_size_max, seed))


def perturb(graph, seed=0, **noise):
    """Returns ``(s_graph, s_to_a)`` where ``s_to_a[s]`` is the A-node observed by S-node ``s``.

    Noise keywords: ``p_drop_room``, ``p_drop_ws``, ``sigma_centroid`` (m),
    ``sigma_normal_angle`` (rad) and ``sigma_length`` (m).
    """
    s, gt = _core.perturb(_dump(graph), seed=seed, **noise)
    return json.loads(s), list(gt)


def augment_edges(graph):
    return json.loads(_core.augment_edges(_dump(graph)))


def generate_corpus(out_dir, count=10, seed=0, **params):
    _core.generate_corpus(str(out_dir), count, seed, **params)


def train(corpus_dir, config=None):
    """Trains on a corpus directory. Returns ``(weights, history)``."""
    weights, history = _core.train(str(corpus_dir), _dump(config or {}))
    return json.loads(weights), json.loads(history)


def match(a_graph, s_graph, weights):
    return json.loads(_core.match(_dump(a_graph), _dump(s_graph), _dump(weights)))


def evaluate(corpus_dir, weights, split="test", timeout_s=60.0):
    return json.loads(_core.evaluate(str(corpus_dir), _dump(weights), split, timeout_s))


def sinkhorn(scores, temperature=1.0, max_iters=100, tol=1e-6):
    return _core.sinkhorn(np.asarray(scores, dtype=float), temperature, max_iters, tol)


def hungarian(similarity):
    """Returns ``[(s, a), ...]`` maximizing total similarity, one pair per column."""
    return _core.hungarian(np.asarray(similarity, dtype=float))


def score(result, s_to_a, n_a):
    return json.loads(_core.score(_dump(result), list(s_to_a), n_a))
