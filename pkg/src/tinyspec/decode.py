"""Lossless greedy decoding strategies over one shared forward contract.

Every strategy commits, per forward pass, the longest draft prefix that
matches the model's own greedy verdicts, plus one bonus token taken from the
verdict at the last verified position. Verdicts are always conditioned on
fully verified context, so each strategy emits byte-for-byte the greedy
autoregressive continuation; the only difference is how many tokens each
forward verifies at once.

Session bookkeeping: the newest committed token is held out as `pending`
and joins the next forward as its first row, which is what produces the
verdict its successors are checked against. The KV cache therefore always
covers every committed token except `pending`.

Strategies:
- ar:        one token per forward (a zero-length draft chain).
- jacobi:    fixed-length guess block, refilled from this step's verdicts
             (fixed-point iteration) topped up with ahead noise.
- pld:       a single draft chain retrieved by suffix n-gram lookup.
- tree:      a static draft tree verified in one forward via a sparse
             ancestor mask; best path commits.
- tr-jacobi: the tree with one path reserved for the retrieval draft and the
             main path carrying the Jacobi continuation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import EOS
from .model import KvCache, TransformerWeights, causal_mask, forward, greedy_next, top_k_tokens
from .noising import sample_ahead_noise

STRATEGIES = ("ar", "jacobi", "pld", "tree", "tr-jacobi")

DEFAULT_BLOCK_LEN = 4
DEFAULT_MAX_NGRAM = 3
DEFAULT_PATH_LEN = 5


@dataclass
class DecodeMetrics:
    committed_tokens: int
    decode_forwards: int
    prefill_forwards: int
    mat: float
    wall_seconds: float
    tokens_per_second: float

    def to_dict(self) -> dict:
        return {
            "committed_tokens": self.committed_tokens,
            "decode_forwards": self.decode_forwards,
            "prefill_forwards": self.prefill_forwards,
            "mat": self.mat,
            "wall_seconds": self.wall_seconds,
            "tokens_per_second": self.tokens_per_second,
        }


def compute_metrics(commits: list[int], prefill_forwards: int, wall_seconds: float) -> DecodeMetrics:
    """commits holds the emitted-token count of each decode forward (prefill excluded)."""
    total = int(sum(commits))
    forwards = len(commits)
    return DecodeMetrics(
        committed_tokens=total,
        decode_forwards=forwards,
        prefill_forwards=prefill_forwards,
        mat=total / forwards if forwards else 0.0,
        wall_seconds=wall_seconds,
        tokens_per_second=total / wall_seconds if wall_seconds > 0 else 0.0,
    )


class DecodeSession:
    """Incremental decoding state: committed tokens, their KV rows, the pending token."""

    def __init__(self, weights: TransformerWeights, prompt: list[int]):
        if not prompt:
            raise ValueError("prompt must be non-empty")
        self.weights = weights
        self.cfg = weights.cfg
        self.cache = KvCache(self.cfg)
        self.committed: list[int] = list(prompt)
        self.pending: int = prompt[-1]
        self.decode_forwards = 0
        self.prefill_forwards = 0
        self.prefill_logits: np.ndarray | None = None
        if len(prompt) > 1:
            if len(prompt) > self.cfg.max_positions:
                raise ValueError("prompt longer than max_positions")
            logits, new_kv = forward(
                weights,
                np.asarray(prompt, dtype=np.int64),
                np.arange(len(prompt)),
                causal_mask(len(prompt)),
            )
            self.cache.append(new_kv, rows=np.arange(len(prompt) - 1))
            self.prefill_forwards = 1
            self.prefill_logits = logits[-1]

    @property
    def n_committed(self) -> int:
        return len(self.committed)

    def step(self, tokens: np.ndarray, positions: np.ndarray, mask: np.ndarray):
        logits, new_kv = forward(self.weights, tokens, positions, mask, self.cache)
        self.decode_forwards += 1
        return logits, new_kv


def verify_chain(session: DecodeSession, guess: list[int]) -> tuple[list[int], list[int]]:
    """One forward over [pending] + guess; commit verified prefix + bonus.

    Returns (committed tokens, candidates). candidates[t] is the greedy verdict
    at chain offset t: candidates[0] answers the pending token, candidates[t]
    answers guess token t. The verified prefix is the longest k with
    guess[:k] == candidates[:k]; the bonus is candidates[k], whose conditioning
    context is fully verified. len(committed) == k + 1 >= 1.
    """
    n = session.n_committed
    m = len(guess)
    tokens = np.asarray([session.pending] + list(guess), dtype=np.int64)
    positions = np.arange(n - 1, n + m)
    logits, new_kv = session.step(tokens, positions, causal_mask(1 + m, session.cache.length))
    candidates = [greedy_next(row) for row in logits]
    k = 0
    while k < m and guess[k] == candidates[k]:
        k += 1
    committed = list(guess[:k]) + [candidates[k]]
    session.cache.append(new_kv, rows=np.arange(k + 1))
    session.committed.extend(committed)
    session.pending = candidates[k]
    return committed, candidates


def jacobi_step(
    session: DecodeSession, guess: list[int], rng: np.random.Generator
) -> tuple[list[int], list[int], list[int]]:
    """Verify the m-token guess block, then refill the next block.

    The next guess reuses this step's verdicts past the bonus (the fixed-point
    update) and tops up to length m with ahead noise drawn from the committed
    sequence. Returns (accepted incl. bonus, next_guess, candidates).
    """
    m = len(guess)
    accepted, candidates = verify_chain(session, guess)
    k = len(accepted) - 1
    next_guess = list(candidates[k + 1 : m])
    while len(next_guess) < m:
        next_guess.append(sample_ahead_noise(session.committed, len(session.committed), rng))
    return accepted, next_guess, candidates


def _emit(
    emitted: list[int], commits: list[int], new_tokens: list[int], max_new: int
) -> bool:
    """Append new tokens, truncating at the first EOS and at max_new; True means stop."""
    take = list(new_tokens)
    stop = False
    if EOS in take:
        take = take[: take.index(EOS) + 1]
        stop = True
    room = max_new - len(emitted)
    if len(take) >= room:
        take = take[:room]
        stop = True
    emitted.extend(take)
    if take:
        commits.append(len(take))
    return stop


def _block_room(session: DecodeSession) -> int:
    """How many draft tokens still fit under the position ceiling (0 = bare AR step only)."""
    return session.cfg.max_positions - session.n_committed


def ar_generate(
    weights: TransformerWeights, prompt: list[int], max_new: int
) -> tuple[list[int], DecodeMetrics]:
    """Plain greedy decoding: every forward commits exactly one token."""
    t0 = time.perf_counter()
    session = DecodeSession(weights, prompt)
    max_new = min(max_new, session.cfg.max_positions - len(prompt))
    emitted: list[int] = []
    commits: list[int] = []
    while len(emitted) < max_new and session.n_committed < session.cfg.max_positions:
        new_tokens, _ = verify_chain(session, [])
        if _emit(emitted, commits, new_tokens, max_new):
            break
    return emitted, compute_metrics(commits, session.prefill_forwards, time.perf_counter() - t0)


def jacobi_generate(
    weights: TransformerWeights,
    prompt: list[int],
    block_len: int = DEFAULT_BLOCK_LEN,
    max_new: int = 64,
    noise_seed: int = 0,
) -> tuple[list[int], DecodeMetrics]:
    """Greedy decoding by fixed-point iteration over blocks of block_len guesses."""
    if block_len < 1:
        raise ValueError("block_len must be >= 1")
    t0 = time.perf_counter()
    session = DecodeSession(weights, prompt)
    max_new = min(max_new, session.cfg.max_positions - len(prompt))
    rng = np.random.default_rng([noise_seed, 0xA11])
    guess = [
        sample_ahead_noise(session.committed, len(session.committed), rng) for _ in range(block_len)
    ]
    emitted: list[int] = []
    commits: list[int] = []
    while len(emitted) < max_new and session.n_committed < session.cfg.max_positions:
        m_eff = min(block_len, _block_room(session))
        accepted, guess, _ = jacobi_step(session, guess[:m_eff], rng)
        if _emit(emitted, commits, accepted, max_new):
            break
    return emitted, compute_metrics(commits, session.prefill_forwards, time.perf_counter() - t0)


def pld_retrieve(
    context: list[int], max_ngram: int = DEFAULT_MAX_NGRAM, path_len: int = DEFAULT_PATH_LEN
) -> list[int] | None:
    """Draft from the context's own history by suffix n-gram match.

    Tries n = max_ngram down to 1: if the last n committed tokens occurred
    earlier, returns the up-to-path_len tokens that followed the most recent
    such occurrence (truncated at the context end). None when nothing matches.
    """
    if max_ngram < 1 or path_len < 1:
        raise ValueError("max_ngram and path_len must be >= 1")
    length = len(context)
    for n in range(min(max_ngram, length - 1), 0, -1):
        suffix = context[length - n :]
        for i in range(length - n - 1, -1, -1):
            if context[i : i + n] == suffix:
                return context[i + n : i + n + path_len]
    return None


def pld_generate(
    weights: TransformerWeights,
    prompt: list[int],
    max_new: int = 64,
    max_ngram: int = DEFAULT_MAX_NGRAM,
    path_len: int = DEFAULT_PATH_LEN,
) -> tuple[list[int], DecodeMetrics]:
    """Retrieval-only speculation: verify each retrieved draft as a single chain."""
    t0 = time.perf_counter()
    session = DecodeSession(weights, prompt)
    max_new = min(max_new, session.cfg.max_positions - len(prompt))
    emitted: list[int] = []
    commits: list[int] = []
    while len(emitted) < max_new and session.n_committed < session.cfg.max_positions:
        draft = pld_retrieve(session.committed, max_ngram, path_len) or []
        draft = draft[: _block_room(session)]
        new_tokens, _ = verify_chain(session, draft)
        if _emit(emitted, commits, new_tokens, max_new):
            break
    return emitted, compute_metrics(commits, session.prefill_forwards, time.perf_counter() - t0)


@dataclass(frozen=True)
class TreeNode:
    parent: int  # -1 for roots
    retrieval: bool = False


@dataclass
class DraftTreeTemplate:
    """Static draft-tree shape: nodes in topological order (parents precede children).

    The non-retrieval roots are the top-K slots (K = their count). At most one
    chain of nodes may be flagged as the retrieval path. The main path is the
    first root's deepest chain (ties toward lower node ids).
    """

    nodes: list[TreeNode]

    def __post_init__(self) -> None:
        retr_by_depth: list[int] = []
        for i, nd in enumerate(self.nodes):
            if not -1 <= nd.parent < i:
                raise ValueError(f"node {i}: parent {nd.parent} must precede it (-1 for roots)")
            if nd.retrieval:
                retr_by_depth.append(i)
        if not self.k_roots:
            raise ValueError("template needs at least one non-retrieval root")
        # retrieval nodes must form one parent-linked chain starting at a root
        for j, i in enumerate(retr_by_depth):
            want_parent = -1 if j == 0 else retr_by_depth[j - 1]
            if self.nodes[i].parent != want_parent:
                raise ValueError("retrieval nodes must form a single root-anchored chain")

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def depths(self) -> list[int]:
        d = []
        for nd in self.nodes:
            d.append(0 if nd.parent < 0 else d[nd.parent] + 1)
        return d

    @property
    def k_roots(self) -> int:
        return sum(1 for nd in self.nodes if nd.parent < 0 and not nd.retrieval)

    @property
    def root_ids(self) -> list[int]:
        return [i for i, nd in enumerate(self.nodes) if nd.parent < 0 and not nd.retrieval]

    @property
    def retrieval_path(self) -> list[int]:
        return [i for i, nd in enumerate(self.nodes) if nd.retrieval]

    def children(self) -> list[list[int]]:
        ch: list[list[int]] = [[] for _ in self.nodes]
        for i, nd in enumerate(self.nodes):
            if nd.parent >= 0:
                ch[nd.parent].append(i)
        return ch

    def ancestors(self, i: int) -> list[int]:
        """Ancestor ids of node i from root downward, excluding i."""
        chain = []
        p = self.nodes[i].parent
        while p >= 0:
            chain.append(p)
            p = self.nodes[p].parent
        return chain[::-1]

    def paths(self) -> list[list[int]]:
        """All root-to-leaf paths in template (depth-first, id-ascending) order."""
        ch = self.children()
        out: list[list[int]] = []

        def walk(i: int, trail: list[int]) -> None:
            trail = trail + [i]
            if not ch[i]:
                out.append(trail)
            for c in ch[i]:
                walk(c, trail)

        for i, nd in enumerate(self.nodes):
            if nd.parent < 0:
                walk(i, [])
        return out

    @property
    def main_path(self) -> list[int]:
        """Deepest chain under the first non-retrieval root; ties keep lower ids."""
        first_root = self.root_ids[0]
        best: list[int] = []
        for p in self.paths():
            if p[0] == first_root and len(p) > len(best):
                best = p
        return best

    def strip_retrieval(self) -> "DraftTreeTemplate":
        """The same tree without its retrieval chain (node ids compacted)."""
        keep = [i for i, nd in enumerate(self.nodes) if not nd.retrieval]
        remap = {old: new for new, old in enumerate(keep)}
        nodes = [
            TreeNode(parent=-1 if self.nodes[i].parent < 0 else remap[self.nodes[i].parent])
            for i in keep
        ]
        return DraftTreeTemplate(nodes)

    @property
    def max_depth(self) -> int:
        return max(self.depths) + 1


def default_template(retrieval: bool = True) -> DraftTreeTemplate:
    """21-node default: 4 top-K roots, a depth-5 main path under the first root,
    depth-5 side chains under the second and third roots, and a depth-5
    retrieval chain with its own root."""
    nodes = [TreeNode(-1), TreeNode(-1), TreeNode(-1), TreeNode(-1), TreeNode(-1, retrieval=True)]
    prev = {"main": 0, "a": 1, "b": 2, "retr": 4}
    for _ in range(4):
        for key, flag in (("main", False), ("a", False), ("b", False), ("retr", True)):
            nodes.append(TreeNode(prev[key], retrieval=flag))
            prev[key] = len(nodes) - 1
    tpl = DraftTreeTemplate(nodes)
    return tpl if retrieval else tpl.strip_retrieval()


def load_template(path: str | Path) -> DraftTreeTemplate:
    """Parse 'id parent_id is_retrieval' lines (commas/parens tolerated, # comments)."""
    rows: list[tuple[int, int, bool]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip().strip("()").replace(",", " ")
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'id parent_id is_retrieval'")
        rows.append((int(parts[0]), int(parts[1]), parts[2].lower() in ("1", "true", "yes")))
    if [r[0] for r in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: node ids must be 0..n-1 in order")
    return DraftTreeTemplate([TreeNode(parent=p, retrieval=r) for _, p, r in rows])


def save_template(tpl: DraftTreeTemplate, path: str | Path) -> None:
    lines = [f"{i} {nd.parent} {int(nd.retrieval)}" for i, nd in enumerate(tpl.nodes)]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class TreeState:
    """A filled draft tree ready to verify: per-node tokens, positions and sparse mask."""

    template: DraftTreeTemplate
    tokens: np.ndarray  # (n_nodes,)
    positions: np.ndarray  # (n_nodes,) = prefix_len + depth
    mask: np.ndarray  # (n_nodes, prefix_len + n_nodes): prefix + ancestors + self
    prefix_len: int


def build_tree(
    template: DraftTreeTemplate,
    root_candidates: list[int] | None,
    continuation: list[int],
    retrieval_draft: list[int] | None,
    committed: list[int],
    rng: np.random.Generator,
) -> TreeState:
    """Assign draft tokens to every template slot.

    Top-K roots take root_candidates best-first; the main path carries the
    Jacobi continuation (continuation[d] lands at main-path depth d); the
    retrieval path takes the retrieved draft. Every remaining slot gets ahead
    noise sampled from the committed sequence, which also covers the whole
    tree on the first step and after a fully accepted path.
    """
    n = len(template)
    if root_candidates is not None and len(root_candidates) != template.k_roots:
        raise ValueError(
            f"got {len(root_candidates)} root candidates for {template.k_roots} top-K roots"
        )
    noise = lambda: sample_ahead_noise(committed, len(committed), rng)  # noqa: E731
    tokens = np.full(n, -1, dtype=np.int64)
    if root_candidates is not None:
        for rid, cand in zip(template.root_ids, root_candidates):
            tokens[rid] = cand
    for d, nid in enumerate(template.main_path):
        if d < len(continuation):
            tokens[nid] = continuation[d]
    if retrieval_draft:
        for d, nid in enumerate(template.retrieval_path):
            if d < len(retrieval_draft):
                tokens[nid] = retrieval_draft[d]
    for i in range(n):
        if tokens[i] < 0:
            tokens[i] = noise()

    prefix_len = len(committed)
    depths = template.depths
    positions = np.asarray([prefix_len + d for d in depths], dtype=np.int64)
    mask = np.zeros((n, prefix_len + n), dtype=bool)
    mask[:, :prefix_len] = True
    for i in range(n):
        mask[i, prefix_len + i] = True
        for a in template.ancestors(i):
            mask[i, prefix_len + a] = True
    return TreeState(template=template, tokens=tokens, positions=positions, mask=mask, prefix_len=prefix_len)


@dataclass
class TreeVerifyResult:
    committed: list[int]  # accepted path tokens + bonus
    best_path: list[int]  # template node ids of the best path
    accept_len: int  # accepted nodes on the best path (bonus excluded)
    next_continuation: list[int]
    next_root_candidates: list[int] | None


def tree_verify(session: DecodeSession, state: TreeState) -> TreeVerifyResult:
    """Verify a whole draft tree in one forward.

    The pending token rides along as the first input row; its verdict is what
    root tokens are checked against. The best path is the one with the longest
    accepted prefix (ties: first path in template order). Commits the accepted
    chain plus the bonus verdict, keeps exactly those KV rows, and reports the
    Jacobi continuation and next top-K read off the rejected remainder of the
    best path.
    """
    tpl = state.template
    n = len(tpl)
    if state.prefix_len != session.n_committed:
        raise ValueError("tree was built for a different committed prefix")
    tokens = np.concatenate([[session.pending], state.tokens]).astype(np.int64)
    positions = np.concatenate([[session.n_committed - 1], state.positions])
    c_len = session.cache.length
    full_mask = np.zeros((1 + n, c_len + 1 + n), dtype=bool)
    full_mask[0, : c_len + 1] = True
    full_mask[1:, :] = state.mask
    logits, new_kv = session.step(tokens, positions, full_mask)

    verdicts = [greedy_next(row) for row in logits]  # verdicts[0] answers pending
    best_path: list[int] = []
    best_accept = -1
    for path in tpl.paths():
        k = 0
        expect = verdicts[0]
        for nid in path:
            if int(state.tokens[nid]) != expect:
                break
            expect = verdicts[1 + nid]
            k += 1
        if k > best_accept:
            best_accept, best_path = k, path
    accepted_ids = best_path[:best_accept]
    bonus = verdicts[1 + accepted_ids[-1]] if accepted_ids else verdicts[0]
    committed = [int(state.tokens[i]) for i in accepted_ids] + [bonus]

    session.cache.append(new_kv, rows=np.asarray([0] + [1 + i for i in accepted_ids], dtype=np.int64))
    session.committed.extend(committed)
    session.pending = bonus

    rest = best_path[best_accept:]
    next_continuation = [verdicts[1 + nid] for nid in rest]
    next_roots = top_k_tokens(logits[1 + rest[0]], tpl.k_roots) if rest else None
    return TreeVerifyResult(
        committed=committed,
        best_path=best_path,
        accept_len=best_accept,
        next_continuation=next_continuation,
        next_root_candidates=next_roots,
    )


def tree_generate(
    weights: TransformerWeights,
    prompt: list[int],
    template: DraftTreeTemplate | None = None,
    max_new: int = 64,
    retrieval: bool = True,
    max_ngram: int = DEFAULT_MAX_NGRAM,
    path_len: int = DEFAULT_PATH_LEN,
    noise_seed: int = 0,
) -> tuple[list[int], DecodeMetrics]:
    """Tree verification each step; with retrieval=True this is tr-jacobi.

    Each iteration retrieves a draft (optional), builds the tree from current
    root candidates + Jacobi continuation + draft + noise, and verifies it in
    one forward. Falls back to bare AR steps when the tree no longer fits
    under the position ceiling.
    """
    if template is None:
        template = default_template(retrieval=retrieval)
    if not retrieval and template.retrieval_path:
        template = template.strip_retrieval()
    t0 = time.perf_counter()
    session = DecodeSession(weights, prompt)
    max_new = min(max_new, session.cfg.max_positions - len(prompt))
    rng = np.random.default_rng([noise_seed, 0x73E])
    root_candidates = (
        top_k_tokens(session.prefill_logits, template.k_roots)
        if session.prefill_logits is not None
        else None
    )
    continuation: list[int] = []
    emitted: list[int] = []
    commits: list[int] = []
    while len(emitted) < max_new and session.n_committed < session.cfg.max_positions:
        if _block_room(session) < template.max_depth:
            new_tokens, _ = verify_chain(session, [])
            if _emit(emitted, commits, new_tokens, max_new):
                break
            root_candidates, continuation = None, []
            continue
        draft = pld_retrieve(session.committed, max_ngram, path_len) if retrieval else None
        state = build_tree(template, root_candidates, continuation, draft, session.committed, rng)
        result = tree_verify(session, state)
        if _emit(emitted, commits, result.committed, max_new):
            break
        root_candidates = result.next_root_candidates
        continuation = result.next_continuation
    return emitted, compute_metrics(commits, session.prefill_forwards, time.perf_counter() - t0)


def tr_jacobi_generate(
    weights: TransformerWeights,
    prompt: list[int],
    template: DraftTreeTemplate | None = None,
    max_new: int = 64,
    max_ngram: int = DEFAULT_MAX_NGRAM,
    path_len: int = DEFAULT_PATH_LEN,
    noise_seed: int = 0,
) -> tuple[list[int], DecodeMetrics]:
    """Tree verification with a live retrieval path: the full combined strategy."""
    return tree_generate(
        weights,
        prompt,
        template=template,
        max_new=max_new,
        retrieval=True,
        max_ngram=max_ngram,
        path_len=path_len,
        noise_seed=noise_seed,
    )


def generate(
    weights: TransformerWeights,
    prompt: list[int],
    strategy: str,
    max_new: int = 64,
    block_len: int = DEFAULT_BLOCK_LEN,
    template: DraftTreeTemplate | None = None,
    max_ngram: int = DEFAULT_MAX_NGRAM,
    path_len: int = DEFAULT_PATH_LEN,
    noise_seed: int = 0,
) -> tuple[list[int], DecodeMetrics]:
    """Dispatch one prompt to a decoding strategy; returns (continuation, metrics)."""
    if strategy == "ar":
        return ar_generate(weights, prompt, max_new)
    if strategy == "jacobi":
        return jacobi_generate(weights, prompt, block_len, max_new, noise_seed)
    if strategy == "pld":
        return pld_generate(weights, prompt, max_new, max_ngram, path_len)
    if strategy == "tree":
        return tree_generate(
            weights, prompt, template=template, max_new=max_new, retrieval=False, noise_seed=noise_seed
        )
    if strategy == "tr-jacobi":
        return tree_generate(
            weights,
            prompt,
            template=template,
            max_new=max_new,
            retrieval=True,
            max_ngram=max_ngram,
            path_len=path_len,
            noise_seed=noise_seed,
        )
    raise ValueError(f"unknown strategy {strategy!r} (expected one of {STRATEGIES})")
