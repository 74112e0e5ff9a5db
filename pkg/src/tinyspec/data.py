"""Byte-level tokens, prompt/response corpora and synthetic tasks.

Token ids 0..255 are raw bytes; BOS/EOS/PAD live above them. A model input
sequence is always [BOS] + prompt + response, with the response ending in
EOS. Text is handled as UTF-8 bytes so any string round-trips.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BYTE_VOCAB = 256
BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 259

_LOWER = "abcdefghijklmnopqrstuvwxyz"


def tokenize(text: str | bytes) -> list[int]:
    """UTF-8 bytes of text as token ids (0..255)."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def detokenize(ids: list[int] | np.ndarray) -> bytes:
    """Byte tokens back to bytes; special ids (BOS/EOS/PAD) are rejected."""
    out = bytearray()
    for i in ids:
        i = int(i)
        if not 0 <= i < BYTE_VOCAB:
            raise ValueError(f"token id {i} is not a byte; strip special tokens first")
        out.append(i)
    return bytes(out)


def to_text(ids: list[int] | np.ndarray) -> str:
    """Lossy display form: bytes decoded as UTF-8 with replacement."""
    return detokenize(ids).decode("utf-8", errors="replace")


@dataclass
class SftSample:
    """One supervised pair. response includes the trailing EOS token."""

    prompt: list[int]
    response: list[int]

    def __post_init__(self) -> None:
        if not self.response or self.response[-1] != EOS:
            raise ValueError("response must end with EOS")

    @property
    def prompt_len(self) -> int:
        """Length of the model-visible prefix: BOS + prompt tokens."""
        return 1 + len(self.prompt)

    def full_tokens(self) -> list[int]:
        return [BOS] + self.prompt + self.response

    @property
    def response_start(self) -> int:
        """Index of the first response token within full_tokens()."""
        return self.prompt_len

    @property
    def response_end(self) -> int:
        """Index of the last response token (the EOS) within full_tokens()."""
        return self.prompt_len + len(self.response) - 1


@dataclass
class Corpus:
    name: str
    samples: list[SftSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)


def make_sample(prompt_text: str | bytes, response_text: str | bytes) -> SftSample:
    return SftSample(prompt=tokenize(prompt_text), response=tokenize(response_text) + [EOS])


def load_jsonl(path: str | Path, max_len: int = 256) -> Corpus:
    """Read {"prompt": ..., "response": ...} records; bad lines fail with their line number."""
    path = Path(path)
    samples: list[SftSample] = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict) or "prompt" not in rec or "response" not in rec:
                raise ValueError(f"{path}:{lineno}: record needs 'prompt' and 'response' fields")
            if not isinstance(rec["prompt"], str) or not isinstance(rec["response"], str):
                raise ValueError(f"{path}:{lineno}: 'prompt' and 'response' must be strings")
            sample = make_sample(rec["prompt"], rec["response"])
            if len(sample.full_tokens()) > max_len:
                raise ValueError(
                    f"{path}:{lineno}: sample length {len(sample.full_tokens())} exceeds limit {max_len}"
                )
            samples.append(sample)
    return Corpus(name=path.stem, samples=samples)


def save_jsonl(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in corpus.samples:
            rec = {"prompt": to_text(s.prompt), "response": to_text(s.response[:-1])}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _rand_word(rng: np.random.Generator, lo: int, hi: int, alphabet: str = _LOWER) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(alphabet[int(c)] for c in rng.integers(0, len(alphabet), size=n))


def gen_synthetic(task: str, n: int, len_range: tuple[int, int] = (8, 14), seed: int = 0) -> Corpus:
    """Deterministic synthetic corpora.

    copy:      'COPY:<s>→'            -> '<s>'
    reverse:   'REV:<s>→'             -> reversed '<s>'
    kv_lookup: 'k=v;k=v;k=v;GET k='   -> matching v
    arith:     'a+b='                 -> decimal sum, a, b < 1000
    """
    if task not in _TASK_SALT:
        raise ValueError(f"unknown task {task!r} (expected one of {sorted(_TASK_SALT)})")
    rng = np.random.default_rng([seed, _TASK_SALT[task]])
    lo, hi = len_range
    samples: list[SftSample] = []
    for _ in range(n):
        if task == "copy":
            s = _rand_word(rng, lo, hi)
            samples.append(make_sample(f"COPY:{s}→", s))
        elif task == "reverse":
            s = _rand_word(rng, lo, hi)
            samples.append(make_sample(f"REV:{s}→", s[::-1]))
        elif task == "kv_lookup":
            # fixed key alphabet {a,b,c}, shuffled per sample; order carries no
            # signal. Each slot draws its value from a disjoint letter band so
            # a response char identifies its source pair unambiguously.
            keys = [_LOWER[int(i)] for i in rng.permutation(3)]
            bands = (_LOWER[3:10], _LOWER[10:17], _LOWER[17:24])
            vals = [_rand_word(rng, lo, hi, alphabet=band) for band in bands]
            q = int(rng.integers(0, len(keys)))
            pairs = ";".join(f"{k}={v}" for k, v in zip(keys, vals))
            # query ends "k=" so the lookup anchor matches the pair sites exactly
            samples.append(make_sample(f"{pairs};GET {keys[q]}=", vals[q]))
        elif task == "arith":
            a, b = int(rng.integers(0, 1000)), int(rng.integers(0, 1000))
            samples.append(make_sample(f"{a}+{b}=", str(a + b)))
        else:
            raise ValueError(f"unknown task {task!r} (expected one of {sorted(_TASK_SALT)})")
    return Corpus(name=task, samples=samples)


_TASK_SALT = {"copy": 1, "reverse": 2, "kv_lookup": 3, "arith": 4}

TASKS = tuple(sorted(_TASK_SALT))


def exact_match_eval(weights, eval_set: Corpus, decode_fn) -> float:
    """Fraction of samples where decode_fn(weights, prompt) reproduces the gold response exactly.

    decode_fn returns generated tokens including the terminating EOS; the
    comparison is token-for-token, so it is invariant to which lossless
    decoding strategy produced the tokens.
    """
    if not eval_set.samples:
        raise ValueError("empty eval set")
    hits = 0
    for s in eval_set.samples:
        got = list(decode_fn(weights, [BOS] + s.prompt))
        hits += got == s.response
    return hits / len(eval_set.samples)
