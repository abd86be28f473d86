"""MovieLens-style rating logs to implicit-feedback leave-one-out splits.

Pipeline::

    ratings = parse_ratings(open("ratings.dat", "rb"))
    interactions = build_interactions(ratings)
    split = leave_one_out(interactions)
    split = sample_test_negatives(interactions, split, seed=0)
    write_split(split, "data/ml-1m")

Every rating, whatever its value, becomes a positive interaction. Items are
0-based dense indices; the raw dataset ids travel with the split so they can
be written to ``idmap.tsv`` and used for explanations.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from ._rng import substream

NEGATIVE = 0
POSITIVE = 1
N_TEST_NEGATIVES = 99

TRAIN_FILE = "train.rating"
TEST_FILE = "test.rating"
NEGATIVE_FILE = "test.negative"
IDMAP_FILE = "idmap.tsv"


class CorpusError(ValueError):
    """Malformed input data or an impossible split request."""


@dataclass(frozen=True)
class RatingRecord:
    user_id: int
    item_id: int
    rating: int
    timestamp: int


@dataclass
class Ratings:
    """Parsed rating log as parallel arrays plus the dense-to-raw id maps."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_ids: np.ndarray  # dense user index -> raw id
    item_ids: np.ndarray  # dense item index -> raw id

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[RatingRecord]:
        for u, i, r, t in zip(self.users, self.items, self.ratings, self.timestamps):
            yield RatingRecord(int(u), int(i), int(r), int(t))


@dataclass
class InteractionSet:
    """Per-user positive items ordered by (timestamp, item_id)."""

    num_users: int
    num_items: int
    histories: list[np.ndarray]
    timestamps: list[np.ndarray]
    user_ids: np.ndarray
    item_ids: np.ndarray


@dataclass(frozen=True)
class TestInstance:
    user_id: int
    positive_item: int
    timestamp: int
    negatives: tuple[int, ...] = ()


@dataclass(frozen=True)
class TrainExample:
    user_id: int
    target_item: int
    label: int


@dataclass
class TrainExamples:
    """One epoch of training examples stored column-wise."""

    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[TrainExample]:
        for u, i, y in zip(self.users, self.items, self.labels):
            yield TrainExample(int(u), int(i), int(y))

    def __getitem__(self, idx) -> "TrainExamples":
        return TrainExamples(self.users[idx], self.items[idx], self.labels[idx])


@dataclass(eq=False)
class SplitDataset:
    num_users: int
    num_items: int
    train_histories: list[np.ndarray]
    train_timestamps: list[np.ndarray]
    test_instances: list[TestInstance]
    user_ids: np.ndarray
    item_ids: np.ndarray
    _positive_keys: np.ndarray | None = field(default=None, repr=False)

    def __eq__(self, other):
        if not isinstance(other, SplitDataset):
            return NotImplemented
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and self.test_instances == other.test_instances
            and np.array_equal(self.user_ids, other.user_ids)
            and np.array_equal(self.item_ids, other.item_ids)
            and _lists_equal(self.train_histories, other.train_histories)
            and _lists_equal(self.train_timestamps, other.train_timestamps)
        )

    def positive_keys(self) -> np.ndarray:
        """Sorted ``user * num_items + item`` keys of every known positive."""
        if self._positive_keys is None:
            keys = [u * self.num_items + h for u, h in enumerate(self.train_histories)]
            keys.append(np.array([t.user_id * self.num_items + t.positive_item
                                  for t in self.test_instances], dtype=np.int64))
            self._positive_keys = np.unique(np.concatenate(keys).astype(np.int64))
        return self._positive_keys

    def is_positive(self, users, items) -> np.ndarray:
        keys = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        known = self.positive_keys()
        pos = np.searchsorted(known, keys)
        pos = np.minimum(pos, len(known) - 1)
        return known[pos] == keys if len(known) else np.zeros(keys.shape, bool)


def _lists_equal(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _remap(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dense ids in first-appearance order; returns (dense, dense->raw)."""
    uniq, first, inverse = np.unique(raw, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return rank[inverse].astype(np.int64), uniq[order].astype(np.int64)


def parse_ratings(stream: Iterable) -> Ratings:
    """Parse ``UserID::MovieID::Rating::Timestamp`` lines.

    ``stream`` may yield ``bytes`` or ``str``. Blank lines are skipped. Raw
    ids are remapped to dense 0-based indices in order of first appearance.
    """
    columns = ([], [], [], [])
    for lineno, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        line = line.strip()
        if not line:
            continue
        parts = line.split("::")
        if len(parts) != 4:
            raise CorpusError(f"line {lineno}: expected 4 '::'-separated fields, got {len(parts)}")
        try:
            values = [int(p) for p in parts]
        except ValueError:
            raise CorpusError(f"line {lineno}: non-integer field in {line!r}") from None
        if not 1 <= values[2] <= 5:
            raise CorpusError(f"line {lineno}: rating {values[2]} outside [1, 5]")
        for col, v in zip(columns, values):
            col.append(v)

    raw_users, raw_items, ratings, timestamps = (np.array(c, dtype=np.int64) for c in columns)
    users, user_ids = _remap(raw_users)
    items, item_ids = _remap(raw_items)
    return Ratings(users, items, ratings, timestamps, user_ids, item_ids)


def subsample_users(ratings: Ratings, n_users: int, seed: int) -> Ratings:
    """Keep ``n_users`` users chosen uniformly at random, re-densifying ids."""
    if n_users >= ratings.num_users:
        return ratings
    keep = substream(seed, "subsample-users").choice(ratings.num_users, n_users, replace=False)
    mask = np.isin(ratings.users, keep)
    users, user_map = _remap(ratings.users[mask])
    items, item_map = _remap(ratings.items[mask])
    return Ratings(users, items, ratings.ratings[mask], ratings.timestamps[mask],
                   ratings.user_ids[user_map], ratings.item_ids[item_map])


def build_interactions(ratings: Ratings) -> InteractionSet:
    users, items, ts = ratings.users, ratings.items, ratings.timestamps
    # earliest timestamp per (user, item)
    order = np.lexsort((ts, items, users))
    u, i, t = users[order], items[order], ts[order]
    first = np.ones(len(u), dtype=bool)
    first[1:] = (u[1:] != u[:-1]) | (i[1:] != i[:-1])
    u, i, t = u[first], i[first], t[first]

    order = np.lexsort((i, t, u))
    u, i, t = u[order], i[order], t[order]
    bounds = np.searchsorted(u, np.arange(ratings.num_users + 1))
    histories = [i[a:b].copy() for a, b in zip(bounds[:-1], bounds[1:])]
    stamps = [t[a:b].copy() for a, b in zip(bounds[:-1], bounds[1:])]
    return InteractionSet(ratings.num_users, ratings.num_items, histories, stamps,
                          ratings.user_ids, ratings.item_ids)


def leave_one_out(interactions: InteractionSet) -> SplitDataset:
    """Hold out each user's latest positive (ties: larger item id)."""
    train, train_ts, tests = [], [], []
    for u, (hist, ts) in enumerate(zip(interactions.histories, interactions.timestamps)):
        if len(hist) < 2:
            raise CorpusError(f"user {u} has {len(hist)} positive(s); leave-one-out needs at least 2")
        train.append(hist[:-1].copy())
        train_ts.append(ts[:-1].copy())
        tests.append(TestInstance(u, int(hist[-1]), int(ts[-1])))
    return SplitDataset(interactions.num_users, interactions.num_items, train, train_ts,
                        tests, interactions.user_ids, interactions.item_ids)


def sample_test_negatives(interactions: InteractionSet, split: SplitDataset, seed: int,
                          n_negatives: int = N_TEST_NEGATIVES) -> SplitDataset:
    """Draw ``n_negatives`` never-interacted items per user without replacement.

    Each user draws from its own sub-stream of ``seed``, so results do not
    depend on iteration order.
    """
    all_items = np.arange(interactions.num_items)
    filled = []
    for inst in split.test_instances:
        eligible = np.setdiff1d(all_items, interactions.histories[inst.user_id], assume_unique=True)
        if len(eligible) < n_negatives:
            raise CorpusError(f"user {inst.user_id}: only {len(eligible)} eligible negative items, "
                              f"need {n_negatives}")
        rng = substream(seed, "test-negatives", inst.user_id)
        drawn = rng.choice(eligible, n_negatives, replace=False)
        filled.append(dataclasses.replace(inst, negatives=tuple(int(x) for x in drawn)))
    return dataclasses.replace(split, test_instances=filled, _positive_keys=None)


def epoch_examples(split: SplitDataset, neg_ratio: int, rng: np.random.Generator) -> TrainExamples:
    """Every train positive plus ``neg_ratio`` uniform negatives, shuffled."""
    lengths = np.array([len(h) for h in split.train_histories], dtype=np.int64)
    pos_users = np.repeat(np.arange(split.num_users, dtype=np.int64), lengths)
    pos_items = (np.concatenate(split.train_histories).astype(np.int64)
                 if len(pos_users) else np.zeros(0, np.int64))

    neg_users = np.repeat(pos_users, neg_ratio)
    neg_items = rng.integers(0, split.num_items, size=len(neg_users))
    bad = np.flatnonzero(split.is_positive(neg_users, neg_items))
    attempts = 0
    while len(bad):
        attempts += 1
        if attempts > 10_000:
            raise CorpusError("negative sampling failed: some user has interacted with every item")
        neg_items[bad] = rng.integers(0, split.num_items, size=len(bad))
        bad = bad[split.is_positive(neg_users[bad], neg_items[bad])]

    users = np.concatenate([pos_users, neg_users])
    items = np.concatenate([pos_items, neg_items])
    labels = np.concatenate([np.full(len(pos_users), POSITIVE, np.int64),
                             np.full(len(neg_users), NEGATIVE, np.int64)])
    order = rng.permutation(len(users))
    return TrainExamples(users[order], items[order], labels[order])


def write_split(split: SplitDataset, directory) -> list[Path]:
    """Write the four canonical split files; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / name for name in (TRAIN_FILE, TEST_FILE, NEGATIVE_FILE, IDMAP_FILE)]

    with open(paths[0], "w", encoding="utf-8", newline="\n") as f:
        for u, (hist, ts) in enumerate(zip(split.train_histories, split.train_timestamps)):
            f.writelines(f"{u}\t{i}\t1\t{t}\n" for i, t in zip(hist, ts))
    with open(paths[1], "w", encoding="utf-8", newline="\n") as f:
        f.writelines(f"{t.user_id}\t{t.positive_item}\t1\t{t.timestamp}\n" for t in split.test_instances)
    with open(paths[2], "w", encoding="utf-8", newline="\n") as f:
        for t in split.test_instances:
            f.write("\t".join([f"({t.user_id},{t.positive_item})", *map(str, t.negatives)]) + "\n")
    with open(paths[3], "w", encoding="utf-8", newline="\n") as f:
        f.writelines(f"{raw}\t{dense}\tuser\n" for dense, raw in enumerate(split.user_ids))
        f.writelines(f"{raw}\t{dense}\titem\n" for dense, raw in enumerate(split.item_ids))
    return paths


def _read_lines(path: Path):
    if not path.is_file():
        raise CorpusError(f"{path.name}: file not found in {path.parent}")
    with open(path, encoding="utf-8") as f:
        return f.read().splitlines()


def _ints(path, lineno, fields):
    try:
        return [int(x) for x in fields]
    except ValueError:
        raise CorpusError(f"{path.name} line {lineno}: non-integer field") from None


def read_split(directory, n_negatives: int = N_TEST_NEGATIVES) -> SplitDataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise CorpusError(f"{directory}: not a directory")

    path = directory / IDMAP_FILE
    maps = {"user": {}, "item": {}}
    for lineno, line in enumerate(_read_lines(path), start=1):
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in maps:
            raise CorpusError(f"{path.name} line {lineno}: expected raw_id<TAB>dense_id<TAB>user|item")
        raw, dense = _ints(path, lineno, parts[:2])
        maps[parts[2]][dense] = raw
    ids = {}
    for kind, m in maps.items():
        if sorted(m) != list(range(len(m))):
            raise CorpusError(f"{path.name}: {kind} dense ids are not contiguous from 0")
        ids[kind] = np.array([m[k] for k in range(len(m))], dtype=np.int64)
    num_users, num_items = len(ids["user"]), len(ids["item"])

    def check_ids(path, lineno, u, i):
        if not (0 <= u < num_users and 0 <= i < num_items):
            raise CorpusError(f"{path.name} line {lineno}: id out of range (user {u}, item {i})")

    path = directory / TRAIN_FILE
    hist = [[] for _ in range(num_users)]
    stamps = [[] for _ in range(num_users)]
    for lineno, line in enumerate(_read_lines(path), start=1):
        parts = line.split("\t")
        if len(parts) != 4 or parts[2] != "1":
            raise CorpusError(f"{path.name} line {lineno}: expected user<TAB>item<TAB>1<TAB>timestamp")
        u, i, _, t = _ints(path, lineno, parts)
        check_ids(path, lineno, u, i)
        hist[u].append(i)
        stamps[u].append(t)

    path = directory / TEST_FILE
    tests = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        parts = line.split("\t")
        if len(parts) != 4 or parts[2] != "1":
            raise CorpusError(f"{path.name} line {lineno}: expected user<TAB>item<TAB>1<TAB>timestamp")
        u, i, _, t = _ints(path, lineno, parts)
        check_ids(path, lineno, u, i)
        if u in tests:
            raise CorpusError(f"{path.name} line {lineno}: duplicate test instance for user {u}")
        tests[u] = (i, t)
    if len(tests) != num_users:
        raise CorpusError(f"{path.name}: {len(tests)} test instances for {num_users} users")

    path = directory / NEGATIVE_FILE
    negatives = {}
    for lineno, line in enumerate(_read_lines(path), start=1):
        parts = line.split("\t")
        head = parts[0]
        if not (head.startswith("(") and head.endswith(")")) or head.count(",") != 1:
            raise CorpusError(f"{path.name} line {lineno}: expected '(user,item)' as first field")
        u, i = _ints(path, lineno, head[1:-1].split(","))
        if len(parts) - 1 != n_negatives:
            raise CorpusError(f"{path.name} line {lineno}: {len(parts) - 1} negatives, expected {n_negatives}")
        if tests.get(u, (None,))[0] != i:
            raise CorpusError(f"{path.name} line {lineno}: ({u},{i}) does not match {TEST_FILE}")
        negatives[u] = tuple(_ints(path, lineno, parts[1:]))
        for n in negatives[u]:
            check_ids(path, lineno, u, n)
    if len(negatives) != num_users:
        raise CorpusError(f"{path.name}: {len(negatives)} lines for {num_users} users")

    return SplitDataset(
        num_users, num_items,
        [np.array(h, dtype=np.int64) for h in hist],
        [np.array(s, dtype=np.int64) for s in stamps],
        [TestInstance(u, tests[u][0], tests[u][1], negatives[u]) for u in range(num_users)],
        ids["user"], ids["item"],
    )


def load_ratings(path) -> Ratings:
    with open(os.fspath(path), "rb") as f:
        return parse_ratings(f)
