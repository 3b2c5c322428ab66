"""Quadruple dataset loading and the immutable, time-indexed event graph."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

INVERSE_PREFIX = "inv_"
SPLIT_FILES = {"train": "train.txt", "valid": "valid.txt", "test": "test.txt"}
ENTITY_MAP_FILE = "entity2id.txt"
RELATION_MAP_FILE = "relation2id.txt"


class DatasetFormatError(ValueError):
    """A dataset file violates the expected on-disk layout."""


class Quadruple(NamedTuple):
    """One timestamped event edge. `t` is in normalized time steps."""

    subject: int
    relation: int
    object: int
    t: int


@dataclass(frozen=True)
class DatasetStats:
    """Split sizes and vocabulary sizes; counts exclude inverse augmentation."""

    n_train: int
    n_valid: int
    n_test: int
    n_entities: int
    n_relations: int
    time_gap: int

    def as_dict(self) -> dict:
        return {
            "n_train": self.n_train,
            "n_valid": self.n_valid,
            "n_test": self.n_test,
            "n_entities": self.n_entities,
            "n_relations": self.n_relations,
            "time_gap": self.time_gap,
        }


class TemporalKG:
    """Immutable store of quadruples with per-(subject,relation) and per-relation
    time-sorted indices.

    Edges are deduplicated and kept in canonical order, sorted by
    (t, subject, relation, object). Index entries are positions into the edge
    arrays, so a position is ascending in time within any index bucket.
    Instances never mutate after construction and are safe to share across
    threads.
    """

    def __init__(
        self,
        entities: Sequence[str],
        relations: Sequence[str],
        quads: Iterable[tuple[int, int, int, int]],
        num_base_relations: Optional[int] = None,
    ):
        self.entities = list(entities)
        self.relations = list(relations)
        # With inverse augmentation the table doubles; base relations keep ids
        # [0, num_base_relations) and inverses occupy ids >= num_base_relations.
        self.num_base_relations = (
            len(relations) if num_base_relations is None else num_base_relations
        )

        raw = [(t, s, r, o) for s, r, o, t in quads]
        unique = sorted(set(raw))
        self.num_duplicates_dropped = len(raw) - len(unique)
        if unique:
            arr = np.array([(s, r, o, t) for t, s, r, o in unique], dtype=np.int64)
        else:
            arr = np.empty((0, 4), dtype=np.int64)
        self.sub = arr[:, 0]
        self.rel = arr[:, 1]
        self.obj = arr[:, 2]
        self.ts = arr[:, 3]
        self._validate_bounds()

        self.index_sr: dict[tuple[int, int], np.ndarray] = {}
        self.index_r: dict[int, np.ndarray] = {}
        sr_buckets: dict[tuple[int, int], list[int]] = {}
        r_buckets: dict[int, list[int]] = {}
        for pos in range(len(self.sub)):
            sr_buckets.setdefault((int(self.sub[pos]), int(self.rel[pos])), []).append(pos)
            r_buckets.setdefault(int(self.rel[pos]), []).append(pos)
        for key, positions in sr_buckets.items():
            self.index_sr[key] = np.array(positions, dtype=np.int64)
        for key, positions in r_buckets.items():
            self.index_r[key] = np.array(positions, dtype=np.int64)

        self._index_so: Optional[dict[tuple[int, int], np.ndarray]] = None
        self._last_time_sro: Optional[dict[tuple[int, int, int], int]] = None
        self._normalized_entity_ids: Optional[dict[str, int]] = None

    # -- basic accessors ----------------------------------------------------

    def __len__(self) -> int:
        return len(self.sub)

    @property
    def t_max(self) -> int:
        return int(self.ts[-1]) if len(self.ts) else 0

    @property
    def has_inverses(self) -> bool:
        return len(self.relations) == 2 * self.num_base_relations and self.num_base_relations > 0

    def quad_at(self, pos: int) -> Quadruple:
        return Quadruple(
            int(self.sub[pos]), int(self.rel[pos]), int(self.obj[pos]), int(self.ts[pos])
        )

    def all_quads(self) -> list[Quadruple]:
        return [self.quad_at(p) for p in range(len(self))]

    def entity_name(self, entity_id: int) -> str:
        return self.entities[entity_id]

    def relation_name(self, relation_id: int) -> str:
        return self.relations[relation_id]

    def inverse_of(self, relation_id: int) -> Optional[int]:
        """Id of the opposite-direction relation, or None without augmentation."""
        if not self.has_inverses:
            return None
        if relation_id < self.num_base_relations:
            return relation_id + self.num_base_relations
        return relation_id - self.num_base_relations

    def contains(self, quad: Quadruple) -> bool:
        positions = self.index_sr.get((quad.subject, quad.relation))
        if positions is None:
            return False
        ts = self.ts[positions]
        lo = int(np.searchsorted(ts, quad.t, side="left"))
        hi = int(np.searchsorted(ts, quad.t, side="right"))
        return any(int(self.obj[positions[i]]) == quad.object for i in range(lo, hi))

    # -- windowed lookups ---------------------------------------------------

    def positions_for(self, subject: int, relation: int, t_lo: int, t_hi: int) -> np.ndarray:
        """Positions of edges (subject, relation, *, t) with t_lo <= t < t_hi."""
        if t_lo > t_hi:
            raise ValueError(f"malformed window [{t_lo}, {t_hi})")
        positions = self.index_sr.get((subject, relation))
        if positions is None:
            return np.empty(0, dtype=np.int64)
        ts = self.ts[positions]
        lo = int(np.searchsorted(ts, t_lo, side="left"))
        hi = int(np.searchsorted(ts, t_hi, side="left"))
        return positions[lo:hi]

    def edges_for(self, subject: int, relation: int, t_lo: int, t_hi: int) -> list[Quadruple]:
        """Edges with that subject and relation in [t_lo, t_hi), ascending by t,
        ties by object id. Unknown subject/relation yields an empty list."""
        return [self.quad_at(int(p)) for p in self.positions_for(subject, relation, t_lo, t_hi)]

    def returning_positions(self, subject: int, obj: int, t_before: int) -> np.ndarray:
        """Positions of edges (subject, *, obj, t) with t strictly before t_before."""
        if self._index_so is None:
            buckets: dict[tuple[int, int], list[int]] = {}
            for pos in range(len(self.sub)):
                buckets.setdefault((int(self.sub[pos]), int(self.obj[pos])), []).append(pos)
            self._index_so = {k: np.array(v, dtype=np.int64) for k, v in buckets.items()}
        positions = self._index_so.get((subject, obj))
        if positions is None:
            return np.empty(0, dtype=np.int64)
        ts = self.ts[positions]
        return positions[: int(np.searchsorted(ts, t_before, side="left"))]

    def last_time_of(self, subject: int, relation: int, obj: int) -> int:
        """Latest time step at which (subject, relation, obj) occurs, or -1."""
        if self._last_time_sro is None:
            last: dict[tuple[int, int, int], int] = {}
            for pos in range(len(self.sub)):
                key = (int(self.sub[pos]), int(self.rel[pos]), int(self.obj[pos]))
                last[key] = int(self.ts[pos])  # positions ascend in t
            self._last_time_sro = last
        return self._last_time_sro.get((subject, relation, obj), -1)

    def normalized_entity_ids(self) -> dict[str, int]:
        """Entity lookup keyed by name with spaces collapsed to underscores."""
        if self._normalized_entity_ids is None:
            self._normalized_entity_ids = {
                name.replace(" ", "_"): eid for eid, name in enumerate(self.entities)
            }
        return self._normalized_entity_ids

    # -- internal -----------------------------------------------------------

    def _validate_bounds(self) -> None:
        if len(self.sub) == 0:
            return
        if int(self.ts.min()) < 0:
            raise DatasetFormatError("negative time step after normalization")
        n_ent, n_rel = len(self.entities), len(self.relations)
        if int(self.sub.max()) >= n_ent or int(self.obj.max()) >= n_ent:
            raise DatasetFormatError("entity id out of vocabulary bounds")
        if int(self.rel.max()) >= n_rel:
            raise DatasetFormatError("relation id out of vocabulary bounds")
        if int(self.sub.min()) < 0 or int(self.obj.min()) < 0 or int(self.rel.min()) < 0:
            raise DatasetFormatError("negative id")


@dataclass(frozen=True)
class DatasetSpec:
    """How to interpret a dataset directory."""

    time_gap: int = 1
    inverse: bool = True

    def __post_init__(self):
        if self.time_gap < 1:
            raise ValueError("time_gap must be >= 1")


class Dataset:
    """Train/valid/test TemporalKG views sharing one vocabulary."""

    def __init__(
        self,
        entities: list[str],
        relations: list[str],
        num_base_relations: int,
        splits: dict[str, TemporalKG],
        time_gap: int,
        time_origin: int,
        duplicates_dropped: int = 0,
    ):
        self.entities = entities
        self.relations = relations
        self.num_base_relations = num_base_relations
        self.train = splits["train"]
        self.valid = splits["valid"]
        self.test = splits["test"]
        self.time_gap = time_gap
        self.time_origin = time_origin
        self.duplicates_dropped = duplicates_dropped

    def split(self, name: str) -> TemporalKG:
        if name not in SPLIT_FILES:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)

    def stats(self) -> DatasetStats:
        return DatasetStats(
            n_train=_base_edge_count(self.train),
            n_valid=_base_edge_count(self.valid),
            n_test=_base_edge_count(self.test),
            n_entities=len(self.entities),
            n_relations=self.num_base_relations,
            time_gap=self.time_gap,
        )

    def union_kg(self, splits: Sequence[str] = ("train", "valid", "test")) -> TemporalKG:
        """One merged view over the given splits (deduplicated)."""
        quads: list[tuple[int, int, int, int]] = []
        for name in splits:
            kg = self.split(name)
            for pos in range(len(kg)):
                quads.append(
                    (int(kg.sub[pos]), int(kg.rel[pos]), int(kg.obj[pos]), int(kg.ts[pos]))
                )
        return TemporalKG(self.entities, self.relations, quads, self.num_base_relations)


def _base_edge_count(kg: TemporalKG) -> int:
    if kg.has_inverses:
        return int(np.count_nonzero(kg.rel < kg.num_base_relations))
    return len(kg)


def _read_id_map(path: str) -> dict[str, int]:
    mapping: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise DatasetFormatError(f"{path}:{lineno}: expected 'name\\tid'")
            name, raw_id = cols
            try:
                idx = int(raw_id)
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: non-integer id {raw_id!r}") from exc
            if name in mapping:
                raise DatasetFormatError(f"{path}:{lineno}: duplicate name {name!r}")
            mapping[name] = idx
    ids = sorted(mapping.values())
    if ids != list(range(len(ids))):
        raise DatasetFormatError(f"{path}: ids are not dense 0..{len(ids) - 1}")
    return mapping


def _parse_split_file(
    path: str,
    entity_ids: Optional[dict[str, int]],
    relation_ids: Optional[dict[str, int]],
    intern_entities: Optional[dict[str, int]],
    intern_relations: Optional[dict[str, int]],
) -> list[tuple[int, int, int, int]]:
    """Returns (subject, relation, object, raw_timestamp) rows in file order."""

    def resolve(token: str, fixed: Optional[dict[str, int]], interned: dict[str, int],
                kind: str, where: str) -> int:
        if fixed is not None:
            try:
                value = int(token)
            except ValueError as exc:
                raise DatasetFormatError(
                    f"{where}: expected integer {kind} id, got {token!r}"
                ) from exc
            if value < 0 or value >= len(fixed):
                raise DatasetFormatError(f"{where}: unknown {kind} id {value}")
            return value
        if token not in interned:
            interned[token] = len(interned)
        return interned[token]

    rows: list[tuple[int, int, int, int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise DatasetFormatError(
                    f"{path}:{lineno}: expected 4 tab-separated columns, got {len(cols)}"
                )
            where = f"{path}:{lineno}"
            s = resolve(cols[0], entity_ids, intern_entities, "entity", where)
            r = resolve(cols[1], relation_ids, intern_relations, "relation", where)
            o = resolve(cols[2], entity_ids, intern_entities, "entity", where)
            try:
                raw_t = int(cols[3])
            except ValueError as exc:
                raise DatasetFormatError(f"{where}: non-integer timestamp {cols[3]!r}") from exc
            rows.append((s, r, o, raw_t))
    return rows


def load_dataset(directory: str, spec: DatasetSpec = DatasetSpec()) -> Dataset:
    """Load train/valid/test quadruple files into indexed views sharing one
    vocabulary.

    Raw timestamps must be exactly divisible by spec.time_gap; they are
    origin-shifted to the earliest timestamp across all splits and divided by
    the gap, so time steps start at 0. With spec.inverse, every edge
    (s, r, o, t) gains a mirrored (o, inv_r, s, t) whose relation id is
    r + num_base_relations.
    """
    entity_map_path = os.path.join(directory, ENTITY_MAP_FILE)
    relation_map_path = os.path.join(directory, RELATION_MAP_FILE)
    has_id_maps = os.path.exists(entity_map_path) and os.path.exists(relation_map_path)

    entity_ids = _read_id_map(entity_map_path) if has_id_maps else None
    relation_ids = _read_id_map(relation_map_path) if has_id_maps else None
    interned_entities: dict[str, int] = {}
    interned_relations: dict[str, int] = {}

    raw_rows: dict[str, list[tuple[int, int, int, int]]] = {}
    for split, filename in SPLIT_FILES.items():
        path = os.path.join(directory, filename)
        if not os.path.exists(path):
            raise DatasetFormatError(f"missing split file {path}")
        raw_rows[split] = _parse_split_file(
            path, entity_ids, relation_ids, interned_entities, interned_relations
        )
    if not raw_rows["train"]:
        raise DatasetFormatError("empty train split")

    if entity_ids is not None:
        entities = [name for name, _ in sorted(entity_ids.items(), key=lambda kv: kv[1])]
        relations = [name for name, _ in sorted(relation_ids.items(), key=lambda kv: kv[1])]
    else:
        entities = list(interned_entities)
        relations = list(interned_relations)

    all_raw_ts = [t for rows in raw_rows.values() for (_, _, _, t) in rows]
    origin = min(all_raw_ts)
    for rows in raw_rows.values():
        for (_, _, _, raw_t) in rows:
            if raw_t % spec.time_gap != 0:
                raise DatasetFormatError(
                    f"timestamp {raw_t} is not divisible by time gap {spec.time_gap}"
                )

    num_base = len(relations)
    if spec.inverse:
        relations = relations + [INVERSE_PREFIX + name for name in relations]

    splits: dict[str, TemporalKG] = {}
    duplicates = 0
    for split, rows in raw_rows.items():
        normalized = {(s, r, o, (raw_t - origin) // spec.time_gap) for s, r, o, raw_t in rows}
        duplicates += len(rows) - len(normalized)
        quads = set(normalized)
        if spec.inverse:
            quads |= {(o, r + num_base, s, t) for s, r, o, t in normalized}
        kg = TemporalKG(entities, relations, quads, num_base)
        splits[split] = kg

    dataset = Dataset(
        entities, relations, num_base, splits, spec.time_gap, origin, duplicates
    )
    return dataset


def save_dataset(dataset: Dataset, directory: str) -> None:
    """Write the canonical on-disk layout: id-form split files (original edges
    only, canonical order, raw timestamps restored) plus both id-map files."""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, ENTITY_MAP_FILE), "w", encoding="utf-8") as fh:
        for idx, name in enumerate(dataset.entities):
            fh.write(f"{name}\t{idx}\n")
    with open(os.path.join(directory, RELATION_MAP_FILE), "w", encoding="utf-8") as fh:
        for idx, name in enumerate(dataset.relations[: dataset.num_base_relations]):
            fh.write(f"{name}\t{idx}\n")
    for split, filename in SPLIT_FILES.items():
        kg = dataset.split(split)
        with open(os.path.join(directory, filename), "w", encoding="utf-8") as fh:
            for pos in range(len(kg)):
                r = int(kg.rel[pos])
                if r >= dataset.num_base_relations:
                    continue
                raw_t = int(kg.ts[pos]) * dataset.time_gap + dataset.time_origin
                fh.write(f"{int(kg.sub[pos])}\t{r}\t{int(kg.obj[pos])}\t{raw_t}\n")
