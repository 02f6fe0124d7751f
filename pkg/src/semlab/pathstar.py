"""Path-star graph task: generation, token serialization, and evaluation.

A task instance has a central node with ``degree_d`` disjoint outgoing paths
of ``path_len_l`` nodes each (center included); node values are distinct
draws from ``[0, value_range_N)``. The model sees the shuffled edge list and
the (start, target) query, and must emit the unique path from the center to
the target leaf.

Token grammar (one token per node value):

    prefix  = (u PAIR_SEP v) * n_edges  QUERY_SEP start target ANSWER_START
    answer  = path nodes, center first, target leaf last, then EOS

so a prefix is ``3 * n_edges + 4`` tokens and an answer ``path_len_l + 1``.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DatasetParseError
from .rng import derive_rng

SPECIALS = ("EDGE_SEP", "PAIR_SEP", "QUERY_SEP", "ANSWER_START", "EOS", "PAD")


@dataclass(frozen=True)
class Vocabulary:
    """Node-value tokens 0..N-1, six specials, then k planning tokens."""

    value_range_n: int
    n_plan_tokens: int

    @property
    def size(self) -> int:
        return self.value_range_n + len(SPECIALS) + self.n_plan_tokens

    def special(self, name: str) -> int:
        return self.value_range_n + SPECIALS.index(name)

    @property
    def edge_sep(self) -> int:
        return self.special("EDGE_SEP")

    @property
    def pair_sep(self) -> int:
        return self.special("PAIR_SEP")

    @property
    def query_sep(self) -> int:
        return self.special("QUERY_SEP")

    @property
    def answer_start(self) -> int:
        return self.special("ANSWER_START")

    @property
    def eos(self) -> int:
        return self.special("EOS")

    @property
    def pad(self) -> int:
        return self.special("PAD")

    @property
    def plan_ids(self) -> list[int]:
        base = self.value_range_n + len(SPECIALS)
        return list(range(base, base + self.n_plan_tokens))

    def surface(self, token_id: int) -> str:
        if 0 <= token_id < self.value_range_n:
            return str(token_id)
        offset = token_id - self.value_range_n
        if offset < len(SPECIALS):
            return f"<{SPECIALS[offset]}>"
        plan = offset - len(SPECIALS)
        if plan < self.n_plan_tokens:
            return f"<PLAN_{plan + 1}>"
        raise ValueError(f"token id {token_id} outside vocabulary of size {self.size}")

    def surfaces(self, token_ids) -> list[str]:
        return [self.surface(int(t)) for t in token_ids]

    def to_dict(self) -> dict:
        return {
            "value_range_n": self.value_range_n,
            "n_plan_tokens": self.n_plan_tokens,
            "specials": {name: self.special(name) for name in SPECIALS},
            "plan_ids": self.plan_ids,
            "size": self.size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(value_range_n=int(d["value_range_n"]), n_plan_tokens=int(d["n_plan_tokens"]))


@dataclass
class PathStarGraph:
    degree_d: int
    path_len_l: int
    value_range_n: int
    paths: list[list[int]]  # each starts at the shared center
    target_path_index: int

    @property
    def center(self) -> int:
        return self.paths[0][0]

    @property
    def correct_path(self) -> list[int]:
        return list(self.paths[self.target_path_index])

    @property
    def target_leaf(self) -> int:
        return self.paths[self.target_path_index][-1]

    def edges(self) -> list[tuple[int, int]]:
        """Directed parent->leaf edges, grouped by path."""
        out = []
        for path in self.paths:
            out.extend((path[j], path[j + 1]) for j in range(len(path) - 1))
        return out

    def node_count(self) -> int:
        return self.degree_d * (self.path_len_l - 1) + 1


@dataclass
class GraphSample:
    prefix_tokens: list[int]
    answer_tokens: list[int]
    degree_d: int
    path_len_l: int
    value_range_n: int
    seed: int = 0
    sample_index: int = 0
    graph: PathStarGraph | None = field(default=None, repr=False)


def default_value_range(degree_d: int, path_len_l: int) -> int:
    """Node values are drawn from {0..d*l - 1} unless overridden."""
    return degree_d * path_len_l


def generate_graph(degree_d: int, path_len_l: int, value_range_n: int,
                   rng: np.random.Generator) -> PathStarGraph:
    if path_len_l < 2:
        raise ConfigurationError(f"path_len_l must be >= 2, got {path_len_l}")
    if degree_d < 1:
        raise ConfigurationError(f"degree_d must be >= 1, got {degree_d}")
    n_nodes = degree_d * (path_len_l - 1) + 1
    if value_range_n < n_nodes:
        raise ConfigurationError(
            f"value_range_n={value_range_n} cannot host {n_nodes} distinct nodes "
            f"for G({degree_d},{path_len_l})"
        )
    values = rng.choice(value_range_n, size=n_nodes, replace=False)
    center = int(values[0])
    arms = values[1:].reshape(degree_d, path_len_l - 1)
    paths = [[center] + [int(v) for v in arms[i]] for i in range(degree_d)]
    target = int(rng.integers(degree_d))
    return PathStarGraph(degree_d, path_len_l, value_range_n, paths, target)


def serialize_sample(graph: PathStarGraph, rng: np.random.Generator,
                     vocab: Vocabulary, seed: int = 0, sample_index: int = 0) -> GraphSample:
    edges = graph.edges()
    order = rng.permutation(len(edges))
    prefix: list[int] = []
    for idx in order:
        u, v = edges[idx]
        prefix.extend((u, vocab.pair_sep, v))
    prefix.extend((vocab.query_sep, graph.center, graph.target_leaf, vocab.answer_start))
    answer = graph.correct_path + [vocab.eos]
    return GraphSample(prefix, answer, graph.degree_d, graph.path_len_l,
                       graph.value_range_n, seed, sample_index, graph=graph)


def parse_prefix(prefix_tokens: list[int], vocab: Vocabulary):
    """Invert the prefix grammar; returns (edge set, start, target)."""
    toks = list(prefix_tokens)
    if len(toks) < 4 or toks[-1] != vocab.answer_start or toks[-4] != vocab.query_sep:
        raise ValueError("prefix does not end with QUERY_SEP start target ANSWER_START")
    start, target = toks[-3], toks[-2]
    body = toks[:-4]
    if len(body) % 3 != 0:
        raise ValueError("edge section length is not a multiple of 3")
    edges = set()
    for i in range(0, len(body), 3):
        u, sep, v = body[i:i + 3]
        if sep != vocab.pair_sep:
            raise ValueError(f"expected PAIR_SEP at offset {i + 1}")
        edges.add((u, v))
    return edges, start, target


def unique_path_bfs(edges, start: int, target: int) -> list[int] | None:
    """Independent oracle: the unique simple path start->target, else None.

    Breadth-first over the undirected edge set, enumerating parent links;
    returns None when zero or multiple simple paths exist.
    """
    adj: dict[int, list[int]] = {}
    for u, v in edges:
        adj.setdefault(u, []).append(v)
        adj.setdefault(v, []).append(u)
    if start not in adj or target not in adj:
        return None
    paths_found = []
    frontier = [[start]]
    while frontier:
        new_frontier = []
        for path in frontier:
            node = path[-1]
            if node == target:
                paths_found.append(path)
                if len(paths_found) > 1:
                    return None
                continue
            for nxt in adj.get(node, ()):
                if nxt not in path:
                    new_frontier.append(path + [nxt])
        frontier = new_frontier
    return paths_found[0] if len(paths_found) == 1 else None


# -- dataset files -------------------------------------------------------------


def dataset_config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def build_dataset(degree_d: int, path_len_l: int, n_train: int, n_test: int, seed: int,
                  out_dir, value_range_n: int | None = None, n_plan_tokens: int = 4) -> dict:
    """Write train/test JSONL files plus vocabulary and manifest sidecars.

    Train and test are drawn i.i.d. from the same G(d, l, N) distribution;
    any sample whose serialized prefix collides with an earlier one (within
    or across splits) is discarded and regenerated from the next derived
    stream, so no prefix appears twice anywhere.
    """
    if n_train <= 0 or n_test <= 0:
        raise ConfigurationError("n_train and n_test must be positive")
    n = value_range_n if value_range_n is not None else default_value_range(degree_d, path_len_l)
    # fail before writing anything if the preset is infeasible
    generate_graph(degree_d, path_len_l, n, derive_rng(seed, "probe"))
    vocab = Vocabulary(n, n_plan_tokens)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    seen: set[tuple] = set()
    index = 0

    def next_sample() -> GraphSample:
        nonlocal index
        while True:
            rng = derive_rng(seed, "sample", index)
            graph = generate_graph(degree_d, path_len_l, n, rng)
            sample = serialize_sample(graph, rng, vocab, seed=seed, sample_index=index)
            index += 1
            key = tuple(sample.prefix_tokens)
            if key not in seen:
                seen.add(key)
                return sample

    config = {"d": degree_d, "l": path_len_l, "N": n, "n_train": n_train,
              "n_test": n_test, "seed": seed, "n_plan_tokens": n_plan_tokens}
    cfg_hash = dataset_config_hash(config)
    counts = {}
    for split, count in (("train", n_train), ("test", n_test)):
        path = out_dir / f"{split}.jsonl"
        with path.open("w") as f:
            for _ in range(count):
                s = next_sample()
                f.write(json.dumps({
                    "prefix": s.prefix_tokens, "answer": s.answer_tokens,
                    "d": s.degree_d, "l": s.path_len_l, "N": s.value_range_n,
                    "seed": s.seed, "sample_index": s.sample_index,
                }, separators=(",", ":")) + "\n")
        counts[split] = count
    (out_dir / "vocab.json").write_text(json.dumps(vocab.to_dict(), indent=1))
    manifest = {"config": config, "config_hash": cfg_hash, "counts": counts,
                "files": {"train": "train.jsonl", "test": "test.jsonl", "vocab": "vocab.json"}}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_samples(path) -> list[GraphSample]:
    samples = []
    with Path(path).open() as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                samples.append(GraphSample(
                    prefix_tokens=[int(t) for t in rec["prefix"]],
                    answer_tokens=[int(t) for t in rec["answer"]],
                    degree_d=int(rec["d"]), path_len_l=int(rec["l"]),
                    value_range_n=int(rec["N"]), seed=int(rec.get("seed", 0)),
                    sample_index=int(rec.get("sample_index", line_no - 1)),
                ))
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise DatasetParseError(str(exc), line_no) from exc
    return samples


def load_vocab(dataset_dir) -> Vocabulary:
    return Vocabulary.from_dict(json.loads((Path(dataset_dir) / "vocab.json").read_text()))


# -- evaluation ----------------------------------------------------------------


@dataclass
class EvalReport:
    exact_match: float
    first_node_acc: float
    continuation_acc: float
    n_evaluated: int
    n_skipped: int
    per_position_acc: list[float]
    decodes: list[list[int]] = field(repr=False, default_factory=list)

    def to_dict(self, with_decodes: bool = False) -> dict:
        d = {"exact_match": self.exact_match, "first_node_acc": self.first_node_acc,
             "continuation_acc": self.continuation_acc, "n_evaluated": self.n_evaluated,
             "n_skipped": self.n_skipped, "per_position_acc": self.per_position_acc}
        if with_decodes:
            d["decodes"] = self.decodes
        return d


def _grouped_indices(samples: list[GraphSample], batch_size: int):
    by_shape: dict[tuple, list[int]] = {}
    for i, s in enumerate(samples):
        by_shape.setdefault((len(s.prefix_tokens), len(s.answer_tokens)), []).append(i)
    for _, idxs in sorted(by_shape.items()):
        for off in range(0, len(idxs), batch_size):
            yield idxs[off:off + batch_size]


def evaluate_model(model, samples: list[GraphSample], batch_size: int = 256,
                   with_continuation: bool = True) -> EvalReport:
    """Greedy-decode every sample and score it.

    ``model`` is any objective wrapper exposing ``generate(prefixes, max_new,
    forced=None)`` and ``fits(prefix_len, answer_len)``. A sample counts as an
    exact match iff the decoded ids equal the reference answer including EOS.
    ``first_node_acc`` scores the first node after the start node (answer
    position 1); ``continuation_acc`` teacher-forces the start node and the
    true first node, then requires the rest of the decode to match exactly.
    Samples too long for the model (OOD presets) are skipped and counted.
    """
    decodes: list[list[int]] = [[] for _ in samples]
    keep: list[int] = []
    n_skipped = 0
    for i, s in enumerate(samples):
        if model.fits(len(s.prefix_tokens), len(s.answer_tokens)):
            keep.append(i)
        else:
            n_skipped += 1

    max_ans = max((len(samples[i].answer_tokens) for i in keep), default=0)
    pos_hits = np.zeros(max_ans, dtype=np.int64)
    pos_counts = np.zeros(max_ans, dtype=np.int64)
    exact = 0
    first_node = 0
    cont_ok = 0

    kept_samples = [samples[i] for i in keep]
    for group in _grouped_indices(kept_samples, batch_size):
        idxs = [keep[j] for j in group]
        prefixes = np.array([samples[i].prefix_tokens for i in idxs], dtype=np.int64)
        ans_len = len(samples[idxs[0]].answer_tokens)
        outs = model.generate(prefixes, max_new=ans_len)
        for i, out in zip(idxs, outs):
            answer = samples[i].answer_tokens
            decodes[i] = out
            if out == answer:
                exact += 1
            if len(out) > 1 and out[1] == answer[1]:
                first_node += 1
            for j in range(len(answer)):
                pos_counts[j] += 1
                if j < len(out) and out[j] == answer[j]:
                    pos_hits[j] += 1
        if with_continuation:
            forced = np.array([samples[i].answer_tokens[:2] for i in idxs], dtype=np.int64)
            cont = model.generate(prefixes, max_new=ans_len - 2, forced=forced)
            for i, out in zip(idxs, cont):
                if out == samples[i].answer_tokens[2:]:
                    cont_ok += 1

    n_eval = len(keep)
    denom = max(n_eval, 1)
    per_pos = [float(pos_hits[j]) / max(int(pos_counts[j]), 1) for j in range(max_ans)]
    return EvalReport(
        exact_match=exact / denom,
        first_node_acc=first_node / denom,
        continuation_acc=(cont_ok / denom) if with_continuation else float("nan"),
        n_evaluated=n_eval,
        n_skipped=n_skipped,
        per_position_acc=per_pos,
        decodes=decodes,
    )


def rescore_exact_match(decodes: list[list[int]], samples: list[GraphSample],
                        vocab: Vocabulary) -> int:
    """Independent re-scorer: compares decoded surface strings, not ids.

    Kept deliberately separate from ``evaluate_model`` so the two counts can
    cross-check each other.
    """
    count = 0
    for out, sample in zip(decodes, samples):
        got = " ".join(vocab.surfaces(out))
        want = " ".join(vocab.surfaces(sample.answer_tokens))
        if got == want:
            count += 1
    return count
