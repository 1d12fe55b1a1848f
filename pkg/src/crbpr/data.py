"""Catalogs, multimodal feature stores, interaction triplets and a synthetic generator."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLITS = ("train", "valid", "test")
SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}

MAGIC = b"CRFT"
FORMAT_VERSION = 1


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


# ---------------------------------------------------------------------------
# catalog
# ---------------------------------------------------------------------------


def _index(ids, kind):
    out = {}
    for i, x in enumerate(ids):
        if x in out:
            raise DataError(f"duplicate {kind} id {x!r}")
        out[x] = i
    return out


class Catalog:
    """Ordered user, given-product and matching-product id sets with dense indices."""

    def __init__(self, users, givens, matchers):
        self.users = list(users)
        self.givens = list(givens)
        self.matchers = list(matchers)
        self.user_index = _index(self.users, "user")
        self.given_index = _index(self.givens, "given")
        self.matcher_index = _index(self.matchers, "matcher")

    @property
    def sizes(self):
        return {"users": len(self.users), "givens": len(self.givens), "matchers": len(self.matchers)}

    def products(self):
        seen = dict.fromkeys(self.givens)
        seen.update(dict.fromkeys(self.matchers))
        return list(seen)

    def __eq__(self, other):
        return (
            isinstance(other, Catalog)
            and self.users == other.users
            and self.givens == other.givens
            and self.matchers == other.matchers
        )

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for kind, ids in (("user", self.users), ("given", self.givens), ("matcher", self.matchers)):
                for x in ids:
                    fh.write(f"{kind}\t{x}\n")

    @classmethod
    def load(cls, path):
        groups = {"user": [], "given": [], "matcher": []}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 2 or parts[0] not in groups:
                    raise DataError(f"{path}:{lineno}: expected 'kind\\tid' with kind in user/given/matcher")
                groups[parts[0]].append(parts[1])
        return cls(groups["user"], groups["given"], groups["matcher"])


# ---------------------------------------------------------------------------
# features
# ---------------------------------------------------------------------------


class FeatureStore:
    """Frozen visual and textual vectors keyed by product id."""

    def __init__(self, ids, visual, textual):
        self.ids = list(ids)
        self.row = _index(self.ids, "product")
        self.visual = np.ascontiguousarray(visual, dtype=np.float32)
        self.textual = np.ascontiguousarray(textual, dtype=np.float32)
        n = len(self.ids)
        if self.visual.ndim != 2 or self.textual.ndim != 2:
            raise DataError("feature matrices must be 2-D")
        if self.visual.shape[0] != n or self.textual.shape[0] != n:
            raise DataError(
                f"feature rows ({self.visual.shape[0]}, {self.textual.shape[0]}) do not match {n} ids"
            )
        for name, mat in (("visual", self.visual), ("textual", self.textual)):
            bad = np.flatnonzero(~np.all(np.isfinite(mat), axis=1))
            if bad.size:
                raise DataError(f"non-finite {name} feature for product {self.ids[bad[0]]!r}")
        self.visual.setflags(write=False)
        self.textual.setflags(write=False)

    @property
    def d_v(self):
        return self.visual.shape[1]

    @property
    def d_w(self):
        return self.textual.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, pid):
        return pid in self.row

    def vectors(self, pid):
        i = self.row[pid]
        return self.visual[i], self.textual[i]

    def rows_for(self, ids):
        try:
            return np.array([self.row[x] for x in ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"no features for product {exc.args[0]!r}") from None

    def validate_catalog(self, catalog: Catalog):
        for pid in catalog.products():
            if pid not in self.row:
                raise DataError(f"catalog product {pid!r} has no features")

    def __eq__(self, other):
        return (
            isinstance(other, FeatureStore)
            and self.ids == other.ids
            and np.array_equal(self.visual, other.visual)
            and np.array_equal(self.textual, other.textual)
        )

    def save(self, visual_path, textual_path, fmt="tsv"):
        writer = {"tsv": write_feature_tsv, "bin": write_feature_bin}[fmt]
        writer(visual_path, self.ids, self.visual)
        writer(textual_path, self.ids, self.textual)


def write_feature_tsv(path, ids, matrix):
    with open(path, "w", encoding="utf-8") as fh:
        for pid, vec in zip(ids, matrix):
            fh.write(pid + "\t" + "\t".join(repr(float(x)) for x in vec) + "\n")


def read_feature_tsv(path):
    ids, rows, dim = [], [], None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            pid = parts[0]
            if dim is None:
                dim = len(parts) - 1
                if dim < 1:
                    raise DataError(f"{path}:{lineno}: no feature columns for {pid!r}")
            if len(parts) - 1 != dim:
                raise DataError(f"{path}:{lineno}: product {pid!r} has {len(parts) - 1} dims, expected {dim}")
            try:
                vec = [float(x) for x in parts[1:]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: unparsable value for product {pid!r}") from None
            if not all(math.isfinite(x) for x in vec):
                raise DataError(f"{path}:{lineno}: non-finite feature for product {pid!r}")
            ids.append(pid)
            rows.append(vec)
    if not ids:
        raise DataError(f"{path}: empty feature file")
    return ids, np.array(rows, dtype=np.float32)


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".ids.tsv")


def write_tensor_bin(path, matrix):
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    count, dim = matrix.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, count, dim))
        fh.write(np.ascontiguousarray(matrix).tobytes())


def read_tensor_bin(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != MAGIC:
            raise DataError(f"{path}: not a CRFT binary file")
        version, count, dim = struct.unpack("<III", head[4:])
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        payload = fh.read()
    if len(payload) != 4 * count * dim:
        raise DataError(f"{path}: expected {count}x{dim} floats, found {len(payload) // 4}")
    return np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float32)


def write_feature_bin(path, ids, matrix):
    write_tensor_bin(path, matrix)
    with open(sidecar_path(path), "w", encoding="utf-8") as fh:
        for i, pid in enumerate(ids):
            fh.write(f"{i}\t{pid}\n")


def read_feature_bin(path):
    matrix = read_tensor_bin(path)
    ids = [None] * matrix.shape[0]
    with open(sidecar_path(path), encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            idx, pid = line.split("\t", 1)
            idx = int(idx)
            if not 0 <= idx < len(ids):
                raise DataError(f"{sidecar_path(path)}:{lineno}: row index {idx} out of range")
            ids[idx] = pid
    if any(x is None for x in ids):
        raise DataError(f"{sidecar_path(path)}: missing row ids")
    bad = np.flatnonzero(~np.all(np.isfinite(matrix), axis=1))
    if bad.size:
        raise DataError(f"{path}: non-finite feature for product {ids[bad[0]]!r}")
    return ids, matrix


def _read_any(path):
    with open(path, "rb") as fh:
        is_bin = fh.read(4) == MAGIC
    return read_feature_bin(path) if is_bin else read_feature_tsv(path)


def load_features(visual_path, textual_path) -> FeatureStore:
    """Load visual and textual features; TSV or CRFT binary is detected per file."""
    vid, vis = _read_any(visual_path)
    tid, txt = _read_any(textual_path)
    vrow = {x: i for i, x in enumerate(vid)}
    if len(vrow) != len(vid):
        raise DataError(f"{visual_path}: duplicate product ids")
    for pid in tid:
        if pid not in vrow:
            raise DataError(f"product {pid!r} has textual but no visual features")
    trow = {x: i for i, x in enumerate(tid)}
    for pid in vid:
        if pid not in trow:
            raise DataError(f"product {pid!r} has visual but no textual features")
    order = np.array([trow[x] for x in vid], dtype=np.int64)
    return FeatureStore(vid, vis, txt[order])


# ---------------------------------------------------------------------------
# triplets
# ---------------------------------------------------------------------------


@dataclass
class TripletSet:
    """Interaction records as dense index arrays into a catalog."""

    catalog: Catalog
    users: np.ndarray
    givens: np.ndarray
    matchers: np.ndarray
    split: np.ndarray = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.givens = np.asarray(self.givens, dtype=np.int64)
        self.matchers = np.asarray(self.matchers, dtype=np.int64)
        if self.split is None:
            self.split = np.zeros(len(self.users), dtype=np.int8)
        self.split = np.asarray(self.split, dtype=np.int8)
        n = len(self.users)
        if not (len(self.givens) == len(self.matchers) == len(self.split) == n):
            raise DataError("triplet arrays have different lengths")

    def __len__(self):
        return len(self.users)

    def subset(self, split) -> "TripletSet":
        mask = self.split == SPLIT_CODE[split]
        return TripletSet(self.catalog, self.users[mask], self.givens[mask], self.matchers[mask], self.split[mask])

    def counts(self):
        return {name: int(np.sum(self.split == code)) for name, code in SPLIT_CODE.items()}

    def records(self):
        c = self.catalog
        for u, g, r, s in zip(self.users, self.givens, self.matchers, self.split):
            yield c.users[u], c.givens[g], c.matchers[r], SPLITS[s]

    def save(self, path, with_split=True):
        with open(path, "w", encoding="utf-8") as fh:
            for u, g, r, s in self.records():
                fh.write(f"{u}\t{g}\t{r}\t{s}\n" if with_split else f"{u}\t{g}\t{r}\n")

    def __eq__(self, other):
        return (
            isinstance(other, TripletSet)
            and self.catalog == other.catalog
            and all(
                np.array_equal(getattr(self, a), getattr(other, a))
                for a in ("users", "givens", "matchers", "split")
            )
        )


def load_triplets(path, catalog: Catalog) -> TripletSet:
    """Read ``user\\tgiven\\tmatcher[\\tsplit]`` rows; rows without a split are train."""
    cols = ([], [], [], [])
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise DataError(f"{path}:{lineno}: expected 3 or 4 tab-separated columns")
            split = parts[3] if len(parts) == 4 else "train"
            if split not in SPLIT_CODE:
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            try:
                u = catalog.user_index[parts[0]]
            except KeyError:
                raise DataError(f"{path}:{lineno}: unknown user {parts[0]!r}") from None
            try:
                g = catalog.given_index[parts[1]]
            except KeyError:
                raise DataError(f"{path}:{lineno}: unknown given product {parts[1]!r}") from None
            try:
                r = catalog.matcher_index[parts[2]]
            except KeyError:
                raise DataError(f"{path}:{lineno}: unknown matching product {parts[2]!r}") from None
            key = (u, g, r, SPLIT_CODE[split])
            if key in seen:
                raise DataError(f"{path}:{lineno}: duplicate record {parts[0]}\t{parts[1]}\t{parts[2]}\t{split}")
            seen.add(key)
            for col, v in zip(cols, key):
                col.append(v)
    return TripletSet(catalog, *cols)


def filter_min_interactions(t: TripletSet, min_interactions: int = 1) -> TripletSet:
    """Drop every record of users with fewer than ``min_interactions`` records."""
    if min_interactions <= 1:
        return t
    counts = np.bincount(t.users, minlength=len(t.catalog.users))
    keep = counts[t.users] >= min_interactions
    return TripletSet(t.catalog, t.users[keep], t.givens[keep], t.matchers[keep], t.split[keep])


def split_triplets(t: TripletSet, ratios=(0.8, 0.1, 0.1), seed=0) -> TripletSet:
    """Per-user stratified random split.

    Each user gets ``floor(ratio * n)`` records per split; the leftover
    records go to the splits furthest behind their global target, so every
    user is within one record of its proportional share and the global
    counts track the ratios.  Users with three or more records always keep
    at least one train record.
    """
    if len(t) == 0:
        raise DataError("cannot split an empty triplet set")
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios < 0) or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios.tolist()}")
    rng = np.random.default_rng(seed)
    split = np.zeros(len(t), dtype=np.int8)
    order = np.argsort(t.users, kind="stable")
    bounds = np.flatnonzero(np.diff(t.users[order])) + 1
    assigned = np.zeros(3, dtype=np.int64)
    seen = 0
    for rows in np.split(order, bounds):
        n = len(rows)
        seen += n
        floor = np.floor(ratios * n + 1e-9).astype(np.int64)
        quota = floor.copy()
        deficit = ratios * seen - (assigned + quota)
        # only splits with a fractional share take a leftover, one each
        deficit[ratios * n - floor <= 1e-9] = -np.inf
        for _ in range(n - quota.sum()):
            pick = int(np.argmax(deficit))
            quota[pick] += 1
            deficit[pick] = -np.inf
        if n >= 3 and ratios[0] > 0 and quota[0] == 0:
            extra = np.flatnonzero(quota > floor)
            donor = int(extra[0]) if len(extra) else int(np.argmax(quota))
            quota[donor] -= 1
            quota[0] += 1
        assigned += quota
        shuffled = rows[rng.permutation(n)]
        split[shuffled] = np.repeat(np.arange(3, dtype=np.int8), quota)
    return TripletSet(t.catalog, t.users, t.givens, t.matchers, split)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_users: int = 50
    n_givens: int = 200
    n_matchers: int = 200
    n_triplets: int = 2000
    latent_dim: int = 8
    noise_std: float = 0.05
    persona_clusters: int = 5
    seed: int = 0
    visual_dim: int = 32
    textual_dim: int = 24
    pool_size: int = 100
    user_spread: float = 0.3
    styles_per_persona: int = 3
    user_weight: float = 1.0
    match_weight: float = 1.0
    rectify: bool = False
    visual_scale: float = 1.0
    textual_scale: float = 1.0
    dim_scale_spread: float = 0.0

    def __post_init__(self):
        for name in ("n_users", "n_givens", "n_matchers", "n_triplets", "latent_dim", "persona_clusters",
                     "visual_dim", "textual_dim", "pool_size", "styles_per_persona"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")
        if self.noise_std < 0:
            raise DataError("noise_std must be non-negative")


@dataclass
class SyntheticData:
    catalog: Catalog
    features: FeatureStore
    triplets: TripletSet
    oracle_scores: np.ndarray
    latents: dict = field(default_factory=dict)

    def oracle(self, u, g, r):
        """Planted preference score for index arrays ``u, g, r``."""
        return _planted_score(self.latents, np.asarray(u), np.asarray(g), np.asarray(r))


def _planted_score(lat, u, g, r):
    zr = lat["z_matcher"][r]
    # user taste: affinity to the closest of the user's style anchors
    styles = lat["user_styles"][u]  # (..., S, D)
    taste = np.max(np.einsum("...sd,...d->...s", styles, zr), axis=-1)
    match = np.einsum("...d,de,...e->...", lat["z_given"][g], lat["match_map"], zr)
    return lat["user_weight"] * taste + lat["match_weight"] * match


def _extract(signal, scale, cfg, rng):
    """Noisy view of a linear image of the latents, optionally rectified and rescaled."""
    out = signal + cfg.noise_std * rng.normal(size=signal.shape)
    if cfg.rectify:
        out = np.maximum(out, 0.0)
    if cfg.dim_scale_spread > 0:
        out = out * np.exp(cfg.dim_scale_spread * rng.normal(size=signal.shape[1]))
    return scale * out


def generate_synthetic(cfg: SynthConfig) -> SyntheticData:
    """Plant user taste, product matching and consistency structure.

    Every user belongs to a persona; a persona owns a few style anchors in the
    latent product space and each user holds a jittered copy of them.  A
    user's affinity for a matcher is its best alignment with any of the
    user's anchors, and a given product's affinity for a matcher is a fixed
    random bilinear form.  Each interaction picks the best of a random
    candidate pool under the sum of both, so repeat choices of a user (and of
    a given product) cluster in feature space.  Visual and textual features
    are fixed random linear images of the product latents plus noise.
    """
    rng = np.random.default_rng(cfg.seed)
    D = cfg.latent_dim
    centers = rng.normal(size=(cfg.persona_clusters, cfg.styles_per_persona, D))
    centers /= np.linalg.norm(centers, axis=-1, keepdims=True)
    persona = rng.integers(cfg.persona_clusters, size=cfg.n_users)
    user_styles = centers[persona] + cfg.user_spread * rng.normal(size=(cfg.n_users, cfg.styles_per_persona, D)) / math.sqrt(D)
    z_given = rng.normal(size=(cfg.n_givens, D)) / math.sqrt(D)
    z_matcher = rng.normal(size=(cfg.n_matchers, D))
    match_map = rng.normal(size=(D, D))
    A = rng.normal(size=(D, cfg.visual_dim)) / math.sqrt(D)
    B = rng.normal(size=(D, cfg.textual_dim)) / math.sqrt(D)

    lat = {
        "persona": persona,
        "user_styles": user_styles,
        "z_given": z_given,
        "z_matcher": z_matcher,
        "match_map": match_map,
        "user_weight": cfg.user_weight,
        "match_weight": cfg.match_weight,
    }

    users = [f"u{i:04d}" for i in range(cfg.n_users)]
    givens = [f"g{i:05d}" for i in range(cfg.n_givens)]
    matchers = [f"r{i:05d}" for i in range(cfg.n_matchers)]
    catalog = Catalog(users, givens, matchers)

    z_all = np.vstack([z_given * math.sqrt(D), z_matcher])
    visual = _extract(z_all @ A, cfg.visual_scale, cfg, rng)
    textual = _extract(z_all @ B, cfg.textual_scale, cfg, rng)
    features = FeatureStore(givens + matchers, visual, textual)

    seen = set()
    us, gs, rs, scores = [], [], [], []
    attempts = 0
    while len(us) < cfg.n_triplets:
        attempts += 1
        if attempts > 50 * cfg.n_triplets:
            raise DataError("could not draw enough distinct triplets; enlarge the catalog")
        u = int(rng.integers(cfg.n_users))
        g = int(rng.integers(cfg.n_givens))
        pool = rng.choice(cfg.n_matchers, size=min(cfg.pool_size, cfg.n_matchers), replace=False)
        s = _planted_score(lat, np.full(len(pool), u), np.full(len(pool), g), pool)
        best = int(np.argmax(s))
        r = int(pool[best])
        if (u, g, r) in seen:
            continue
        seen.add((u, g, r))
        us.append(u)
        gs.append(g)
        rs.append(r)
        scores.append(s[best])
    triplets = TripletSet(catalog, us, gs, rs)
    return SyntheticData(catalog, features, triplets, np.array(scores), lat)


def save_dataset(directory, catalog: Catalog, features: FeatureStore, triplets: TripletSet, fmt="tsv"):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    catalog.save(directory / "catalog.tsv")
    ext = "tsv" if fmt == "tsv" else "bin"
    features.save(directory / f"visual.{ext}", directory / f"textual.{ext}", fmt=fmt)
    triplets.save(directory / "triplets.tsv")


def load_dataset(directory, min_interactions: int = 1):
    """Read ``catalog.tsv``, ``visual.*``, ``textual.*`` and ``triplets.tsv`` from a directory."""
    directory = Path(directory)
    catalog = Catalog.load(directory / "catalog.tsv")

    def pick(stem):
        for ext in ("bin", "tsv"):
            p = directory / f"{stem}.{ext}"
            if p.exists():
                return p
        raise DataError(f"{directory}: no {stem}.tsv or {stem}.bin")

    features = load_features(pick("visual"), pick("textual"))
    features.validate_catalog(catalog)
    triplets = filter_min_interactions(load_triplets(directory / "triplets.tsv", catalog), min_interactions)
    return catalog, features, triplets


@dataclass
class Dataset:
    catalog: Catalog
    features: FeatureStore
    triplets: TripletSet

    @property
    def train(self):
        return self.triplets.subset("train")

    @property
    def valid(self):
        return self.triplets.subset("valid")

    @property
    def test(self):
        return self.triplets.subset("test")
