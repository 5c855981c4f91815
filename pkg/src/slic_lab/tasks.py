"""Synthetic conditional-generation tasks.

``salient_copy``: the context is several SEP-delimited groups of content
tokens, one of them preceded by KEY; the target is that group.
``sorted_unique``: the target is the context's distinct tokens in ascending
order.  Content tokens inside a target never repeat, so clean references are
repetition-free.  With probability ``noise_rate`` the target is perturbed by
dropping one token or swapping two adjacent tokens.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .model import EOS

SEP, KEY = 3, 4
FIRST_CONTENT = 5
TASKS = ("salient_copy", "sorted_unique")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task: str = "salient_copy"
    vocab_size: int = 128
    input_len: tuple[int, int] = (4, 12)
    group_len: tuple[int, int] = (2, 6)
    num_groups: tuple[int, int] = (2, 4)
    num_train: int = 20000
    num_val: int = 300
    num_test: int = 300
    seed: int = 0
    noise_rate: float = 0.1
    max_target_len: int = 16

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if min(self.num_train, self.num_val, self.num_test) < 1:
            raise ValueError("every split needs at least one example")
        if not 0 <= self.noise_rate < 1:
            raise ValueError("noise_rate must be in [0, 1)")
        if self.vocab_size <= FIRST_CONTENT + 1:
            raise ValueError("vocab_size too small for the task tokens")
        for name in ("input_len", "group_len", "num_groups"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must be a range with 1 <= lo <= hi")
            object.__setattr__(self, name, (int(lo), int(hi)))
        if self.max_target_len < 2:
            raise ValueError("max_target_len must leave room for one token and EOS")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_len", "group_len", "num_groups"):
            d[k] = list(d[k])
        return d


@dataclass(frozen=True)
class Example:
    id: str
    x: tuple[int, ...]
    y: tuple[int, ...]

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "x": list(self.x), "y": list(self.y)})

    @classmethod
    def from_dict(cls, d) -> Example:
        return cls(str(d["id"]), tuple(d["x"]), tuple(d["y"]))


def salient_copy(groups, key_index: int) -> tuple[list[int], list[int]]:
    """Context and clean target (without EOS) for explicit groups."""
    x: list[int] = []
    for i, g in enumerate(groups):
        if i:
            x.append(SEP)
        if i == key_index:
            x.append(KEY)
        x.extend(g)
    return x, list(groups[key_index])


def sorted_unique(x) -> list[int]:
    return sorted(set(int(t) for t in x))


def perturb(target: list[int], rng: np.random.Generator) -> list[int]:
    """Drop one token or swap two adjacent ones (targets of length 1 are left alone)."""
    if len(target) < 2:
        return list(target)
    t = list(target)
    if rng.random() < 0.5:
        del t[int(rng.integers(len(t)))]
    else:
        i = int(rng.integers(len(t) - 1))
        t[i], t[i + 1] = t[i + 1], t[i]
    return t


def _one(spec: SyntheticTaskSpec, rng: np.random.Generator) -> tuple[list[int], list[int]]:
    content = np.arange(FIRST_CONTENT, spec.vocab_size)
    if spec.task == "salient_copy":
        k = int(rng.integers(spec.num_groups[0], spec.num_groups[1] + 1))
        groups = []
        for _ in range(k):
            n = int(rng.integers(spec.group_len[0], spec.group_len[1] + 1))
            groups.append([int(t) for t in rng.choice(content, size=n, replace=False)])
        x, y = salient_copy(groups, int(rng.integers(k)))
    else:
        n = int(rng.integers(spec.input_len[0], spec.input_len[1] + 1))
        x = [int(t) for t in rng.choice(content, size=n, replace=True)]
        y = sorted_unique(x)
    if spec.noise_rate and rng.random() < spec.noise_rate:
        y = perturb(y, rng)
    return x, y


def generate_dataset(spec: SyntheticTaskSpec) -> dict[str, list[Example]]:
    """Train/val/test splits; a pure function of ``spec`` (including its seed)."""
    rng = np.random.default_rng(spec.seed)
    splits = {}
    for name, n in (("train", spec.num_train), ("val", spec.num_val), ("test", spec.num_test)):
        out = []
        while len(out) < n:
            x, y = _one(spec, rng)
            if len(y) + 1 > spec.max_target_len or not y:
                continue
            out.append(Example(f"{name}-{len(out):06d}", tuple(x), tuple(y) + (EOS,)))
        splits[name] = out
    return splits


def write_dataset(splits: dict[str, list[Example]], out_dir, spec: SyntheticTaskSpec) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, exs in splits.items():
        (out / f"{name}.jsonl").write_text("".join(e.to_json() + "\n" for e in exs))
    (out / "task.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def read_split(data_dir, split: str) -> list[Example]:
    path = Path(data_dir) / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"dataset split not found: {path}")
    return [Example.from_dict(json.loads(line)) for line in path.read_text().splitlines() if line.strip()]


def words(tokens) -> list[int]:
    """Token ids as ROUGE words: EOS and anything after it dropped."""
    out = []
    for t in tokens:
        if t == EOS:
            break
        out.append(int(t))
    return out
