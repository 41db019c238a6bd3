"""File formats and run manifests.

CSV is the interchange default. Embedding matrices above ``BINARY_THRESHOLD``
values go to the ``EMB1`` binary format instead. All writers use full float
precision so that reading back yields identical arrays.
"""

import hashlib
import json
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from copyspace.demand import ConsumerDraws, DemandParams, Market
from copyspace.geometry import PcaReducer

EMB_MAGIC = b"EMB1"
BINARY_THRESHOLD = 2_000_000
FLOAT_FORMAT = "%.17g"


class DataIOError(OSError):
    pass


# ------------------------------------------------------------------ JSON


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        obj = float(obj)
        return obj if np.isfinite(obj) else None
    return obj


def canonical_json(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json(path, obj):
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataIOError(f"missing file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataIOError(f"invalid JSON in {path}: {exc}") from exc


def write_params(path, params: DemandParams):
    return write_json(path, params.to_dict())


def read_params(path):
    return DemandParams.from_dict(read_json(path))


def write_pca(path, reducer: PcaReducer):
    return write_json(path, reducer.to_dict())


def read_pca(path):
    return PcaReducer.from_dict(read_json(path))


# ------------------------------------------------------------ embeddings


def write_embeddings_csv(path, ids, embeddings):
    emb = np.asarray(embeddings, dtype=float)
    df = pd.DataFrame(emb, columns=[f"v{i + 1}" for i in range(emb.shape[1])])
    df.insert(0, "product_id", np.asarray(ids))
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return Path(path)


def read_embeddings_csv(path):
    df = _read_csv(path)
    cols = [c for c in df.columns if c.startswith("v")]
    cols.sort(key=lambda c: int(c[1:]))
    return df["product_id"].to_numpy(), df[cols].to_numpy(dtype=float)


def write_embeddings_bin(path, ids, embeddings):
    """``EMB1`` layout, all little-endian.

    magic (4 bytes) | dim uint32 | count uint64 | ids int64[count] |
    values float64[dim * count] stored column by column (dimension-major).
    """
    emb = np.asarray(embeddings, dtype="<f8")
    ids = np.asarray(ids, dtype="<i8")
    count, dim = emb.shape
    if ids.shape != (count,):
        raise DataIOError("ids and embeddings disagree on count")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<IQ", dim, count))
        fh.write(ids.tobytes())
        fh.write(np.asfortranarray(emb).tobytes(order="F"))
    return Path(path)


def read_embeddings_bin(path):
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise DataIOError(f"missing file: {path}") from exc
    if raw[:4] != EMB_MAGIC:
        raise DataIOError(f"{path} is not an EMB1 file")
    dim, count = struct.unpack("<IQ", raw[4:16])
    need = 16 + 8 * count + 8 * dim * count
    if len(raw) != need:
        raise DataIOError(f"{path}: expected {need} bytes, found {len(raw)}")
    ids = np.frombuffer(raw, dtype="<i8", count=count, offset=16).astype(np.int64)
    vals = np.frombuffer(raw, dtype="<f8", count=dim * count, offset=16 + 8 * count)
    return ids, vals.reshape((count, dim), order="F").astype(float)


def write_embeddings(out_dir, ids, embeddings):
    """CSV unless the matrix is large; returns the path written."""
    emb = np.asarray(embeddings)
    if emb.size > BINARY_THRESHOLD:
        return write_embeddings_bin(Path(out_dir) / "embeddings.emb1", ids, emb)
    return write_embeddings_csv(Path(out_dir) / "embeddings.csv", ids, emb)


def read_embeddings(data_dir):
    d = Path(data_dir)
    if (d / "embeddings.emb1").exists():
        return read_embeddings_bin(d / "embeddings.emb1")
    return read_embeddings_csv(d / "embeddings.csv")


# --------------------------------------------------------------- markets


def _read_csv(path, **kw):
    try:
        return pd.read_csv(path, float_precision="round_trip", **kw)
    except FileNotFoundError as exc:
        raise DataIOError(f"missing file: {path}") from exc


def markets_frame(markets, shifter=None):
    """One row per product-market; reduced embeddings inline as x1..xK."""
    frames = []
    for m in markets:
        df = pd.DataFrame(
            {
                "market_id": m.market_id,
                "product_id": m.product_ids,
                "firm_id": m.firm_ids,
                "nest_id": m.nest_ids,
                "price": m.prices,
                "share": m.shares if m.shares is not None else np.nan,
                "xi": m.xi,
                "mc": m.mc if m.mc is not None else np.nan,
                "market_size": m.market_size,
                "country": m.country,
                "period": m.period,
                "entry_period": m.entry_period if m.entry_period is not None else -1,
            }
        )
        for i in range(m.x_struct.shape[1]):
            df[f"glyphs{i + 1}" if i else "glyphs"] = m.x_struct[:, i]
        for i in range(m.x_emb.shape[1]):
            df[f"x{i + 1}"] = m.x_emb[:, i]
        frames.append(df)
    out = pd.concat(frames, ignore_index=True)
    if shifter is not None:
        out["cost_shifter"] = np.asarray(shifter, dtype=float)
    return out


def write_markets_csv(path, markets, shifter=None):
    markets_frame(markets, shifter).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return Path(path)


def _sorted_cols(df, prefix):
    cols = [c for c in df.columns if c == prefix or (c.startswith(prefix) and c[len(prefix) :].isdigit())]
    return sorted(cols, key=lambda c: int(c[len(prefix) :] or 1))


def read_markets_csv(path, draws: ConsumerDraws, embeddings=None):
    """Markets (in file order) and the stacked cost shifter (or None).

    ``embeddings`` is an optional ``(ids, matrix)`` pair used to attach
    full-dimension embeddings by product id.
    """
    df = _read_csv(path)
    need = {"market_id", "product_id", "firm_id", "nest_id", "price", "xi", "market_size"}
    missing = need - set(df.columns)
    if missing:
        raise DataIOError(f"{path} lacks columns: {', '.join(sorted(missing))}")
    struct_cols = _sorted_cols(df, "glyphs")
    emb_cols = _sorted_cols(df, "x")
    lookup = None
    if embeddings is not None:
        lookup = pd.Series(np.arange(len(embeddings[0])), index=embeddings[0])
    markets = []
    for mid, g in df.groupby("market_id", sort=False):
        full = None
        if lookup is not None:
            full = embeddings[1][lookup.loc[g["product_id"].to_numpy()].to_numpy()]
        has = lambda c: c in g.columns and not g[c].isna().all()  # noqa: E731
        markets.append(
            Market(
                market_id=mid,
                product_ids=g["product_id"].to_numpy(),
                firm_ids=g["firm_id"].to_numpy(),
                nest_ids=g["nest_id"].to_numpy(),
                prices=g["price"].to_numpy(dtype=float),
                x_struct=g[struct_cols].to_numpy(dtype=float),
                x_emb=g[emb_cols].to_numpy(dtype=float),
                xi=g["xi"].to_numpy(dtype=float),
                market_size=float(g["market_size"].iloc[0]),
                draws=draws,
                mc=g["mc"].to_numpy(dtype=float) if has("mc") else None,
                x_full=full,
                shares=g["share"].to_numpy(dtype=float) if has("share") else None,
                entry_period=g["entry_period"].to_numpy() if "entry_period" in g else None,
                country=g["country"].iloc[0] if "country" in g else None,
                period=g["period"].iloc[0] if "period" in g else None,
            )
        )
    shifter = df["cost_shifter"].to_numpy(dtype=float) if "cost_shifter" in df.columns else None
    return markets, shifter


def write_draws_csv(path, draws: ConsumerDraws):
    df = pd.DataFrame(draws.z, columns=[f"z{i + 1}" for i in range(draws.z.shape[1])])
    df.insert(0, "weight", draws.weights)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return Path(path)


def read_draws_csv(path):
    df = _read_csv(path)
    return ConsumerDraws(df[_sorted_cols(df, "z")].to_numpy(dtype=float), df["weight"].to_numpy(dtype=float))


# --------------------------------------------------------------- datasets


def save_dataset(ds, out_dir):
    """Write a :class:`~copyspace.synth.SyntheticDataset`; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    markets, shifter = ds.market_list()
    paths = [
        write_json(out / "config.json", ds.config.to_dict()),
        write_params(out / "true_params.json", ds.params),
        write_json(out / "true_cost.json", ds.cost.to_dict()),
        write_pca(out / "pca.json", ds.reducer),
        write_embeddings(out, ds.products["product_id"].to_numpy(), ds.embeddings),
        write_draws_csv(out / "draws.csv", markets[0].draws),
        write_markets_csv(out / "markets.csv", markets, shifter),
    ]
    for name, frame in (("products.csv", ds.products), ("panel.csv", ds.panel), ("entrants.csv", ds.entrants)):
        frame.to_csv(out / name, index=False, float_format=FLOAT_FORMAT)
        paths.append(out / name)
    return paths


@dataclass
class LoadedData:
    markets: list
    shifter: np.ndarray
    draws: ConsumerDraws
    embeddings: tuple
    reducer: PcaReducer
    products: pd.DataFrame
    panel: pd.DataFrame
    entrants: pd.DataFrame
    config: dict
    true_params: DemandParams = None
    true_cost: dict = None

    def snapshot(self, period=None):
        period = max(m.period for m in self.markets) if period is None else period
        snap = [m for m in self.markets if m.period == period]
        return sorted(snap, key=lambda m: m.country)


def load_dataset(data_dir):
    d = Path(data_dir)
    if not d.is_dir():
        raise DataIOError(f"data directory {d} does not exist")
    draws = read_draws_csv(d / "draws.csv")
    emb = read_embeddings(d)
    markets, shifter = read_markets_csv(d / "markets.csv", draws, emb)
    return LoadedData(
        markets=markets,
        shifter=shifter,
        draws=draws,
        embeddings=emb,
        reducer=read_pca(d / "pca.json"),
        products=_read_csv(d / "products.csv"),
        panel=_read_csv(d / "panel.csv"),
        entrants=_read_csv(d / "entrants.csv") if (d / "entrants.csv").stat().st_size > 1 else pd.DataFrame(),
        config=read_json(d / "config.json"),
        true_params=read_params(d / "true_params.json") if (d / "true_params.json").exists() else None,
        true_cost=read_json(d / "true_cost.json") if (d / "true_cost.json").exists() else None,
    )


# -------------------------------------------------------------- manifest


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config):
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def content_version():
    """Git-style hash of the package source: sha1 over (path, blob hash) pairs."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha1()
    for p in sorted(root.rglob("*.py")):
        data = p.read_bytes()
        blob = hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
        h.update(f"{p.relative_to(root).as_posix()} {blob}\n".encode())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list
    config_hash: str
    seed: object
    version: str
    started: float
    elapsed: float = 0.0
    outputs: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    @classmethod
    def start(cls, command, argv, config, seed, flags=None):
        return cls(command, list(argv), config_hash(config), seed, content_version(), time.time(), flags=dict(flags or {}))

    def finish(self, out_dir):
        """Digest every file in ``out_dir`` and write ``manifest.json``."""
        out = Path(out_dir)
        self.elapsed = time.time() - self.started
        self.outputs = {
            str(p.relative_to(out).as_posix()): file_digest(p) for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"
        }
        write_json(out / "manifest.json", asdict(self))
        return out / "manifest.json"

    @classmethod
    def read(cls, path):
        return cls(**read_json(path))


def env_threads(default=None):
    val = os.environ.get("CML_THREADS")
    if val is None:
        return default
    try:
        n = int(val)
    except ValueError as exc:
        raise ValueError(f"CML_THREADS must be a positive integer, got {val!r}") from exc
    if n < 1:
        raise ValueError("CML_THREADS must be positive")
    return n
