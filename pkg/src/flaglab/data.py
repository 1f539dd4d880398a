"""Gene-panel selection, normalization, synthetic slides, and file I/O.

File formats share one convention: a UTF-8 structured-text header (magic
line, `key: value` pairs, JSON arrays for name lists) terminated by a blank
line, followed by raw little-endian float32 blocks in declared order. The
payloads round-trip bitwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConstructionError, ContractError, FileFormatError
from .rng import derive_seed, numpy_gen
from .spatial_graph import SlideSample
from .validation import check_array

SLIDE_MAGIC = "flaglab-slide v1"
PRED_MAGIC = "flaglab-predictions v1"
MATRIX_MAGIC = "flaglab-matrix v1"
GFM_MAGIC = "flaglab-gfm-embeddings v1"
PANEL_MAGIC = "flaglab-gene-panel v1"

GRID_SPACING = 100.0   # px between synthetic spots
VISUAL_NOISE = 0.1
PD_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# gene selection and normalization

@dataclass
class GenePanel:
    names: list[str]
    indices: list[int]
    means: np.ndarray
    stds: np.ndarray
    k_search: int


def _rank_order(stat: np.ndarray, names: list[str]) -> list[int]:
    # descending statistic, ties by lexicographic gene name
    return sorted(range(len(names)), key=lambda i: (-stat[i], names[i]))


def hmhvg_select(train_expr: np.ndarray, names: list[str], target_g: int) -> GenePanel:
    """High-mean, high-variance panel via the smallest top-K intersection.

    Ranks genes by mean and by standard deviation over training spots,
    grows K until the two top-K sets share at least target_g genes, then
    truncates the intersection by descending mean (ties lexicographic).
    Statistics must come from training spots only; this function sees only
    what it is given.
    """
    expr = check_array(train_expr, "train_expr", ndim=2)
    g_all = expr.shape[1]
    if len(names) != g_all:
        raise ContractError(f"{len(names)} names for {g_all} expression columns")
    if len(set(names)) != g_all:
        raise ContractError("gene names must be unique")
    if not (1 <= target_g <= g_all):
        raise ContractError(f"target_g must be in [1, {g_all}], got {target_g}")
    means = expr.mean(axis=0)
    stds = expr.std(axis=0, ddof=1)
    by_mean = _rank_order(means, names)
    by_std = _rank_order(stds, names)
    k = target_g
    while True:
        inter = set(by_mean[:k]) & set(by_std[:k])
        if len(inter) >= target_g or k == g_all:
            break
        k += 1
    chosen = sorted(inter, key=lambda i: (-means[i], names[i]))[:target_g]
    return GenePanel(
        names=[names[i] for i in chosen],
        indices=list(chosen),
        means=means[chosen],
        stds=stds[chosen],
        k_search=k,
    )


def log1p_normalize(raw_counts: np.ndarray) -> np.ndarray:
    """Elementwise log(1 + x); rejects negative counts."""
    arr = np.asarray(raw_counts, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ContractError("raw counts contain non-finite values")
    if (arr < 0).any():
        raise ContractError("raw counts must be nonnegative")
    return np.log1p(arr)


# ---------------------------------------------------------------------------
# synthetic slides

@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings for one synthetic slide.

    Slides sharing (seed, N, G, d_visual) share the ground-truth spot
    covariance and the expression-to-visual sketch; slide_index varies the
    gene draws and visual noise, so a cohort of related slides is just a
    range of indices.
    """

    N: int = 64
    G: int = 50
    cov_kind: str = "spatial_rbf"   # identity | spatial_rbf | block
    length_scale: float = 150.0
    seed: int = 0
    d_visual: int = 32
    slide_index: int = 0
    visual_informative: bool = True


def _grid_coords(n: int) -> np.ndarray:
    side = math.ceil(math.sqrt(n))
    ij = np.arange(side * side)
    coords = np.stack([ij % side, ij // side], axis=1).astype(np.float64)
    return coords[:n] * GRID_SPACING


def _ensure_pd(a: np.ndarray) -> np.ndarray:
    for jitter in (PD_FLOOR, 1e-4):
        cand = a + jitter * np.eye(a.shape[0])
        if np.linalg.eigvalsh(cand).min() >= PD_FLOOR:
            return cand
    raise ConstructionError("covariance not positive definite after jitter")


def build_spot_covariance(spec: SyntheticSpec) -> np.ndarray:
    coords = _grid_coords(spec.N)
    if spec.cov_kind == "identity":
        return np.eye(spec.N)
    if spec.cov_kind == "spatial_rbf":
        diff = coords[:, None, :] - coords[None, :, :]
        d2 = np.einsum("ijc,ijc->ij", diff, diff)
        return _ensure_pd(np.exp(-d2 / (2.0 * spec.length_scale**2)))
    if spec.cov_kind == "block":
        n_blocks = min(4, spec.N)
        labels = np.minimum(np.arange(spec.N) * n_blocks // spec.N, n_blocks - 1)
        mask = (labels[:, None] == labels[None, :]).astype(np.float64)
        rho = 0.6
        return _ensure_pd((1 - rho) * np.eye(spec.N) + rho * mask)
    raise ContractError(f"unknown cov_kind {spec.cov_kind!r}")


def synth_slide(spec: SyntheticSpec) -> tuple[SlideSample, np.ndarray]:
    """Draw one slide from the Gaussian field model.

    Gene columns are i.i.d. N(0, A*) over spots; visual features are a
    fixed random linear sketch of expression plus noise, so the
    image-to-expression mapping is informative but one-to-many.
    """
    if spec.N < 2 or spec.G < 1:
        raise ContractError(f"need N >= 2 and G >= 1, got N={spec.N}, G={spec.G}")
    a_star = build_spot_covariance(spec)
    chol = np.linalg.cholesky(a_star)
    gene_rng = numpy_gen(derive_seed(spec.seed, "genes", spec.slide_index))
    x0 = chol @ gene_rng.standard_normal((spec.N, spec.G))
    noise_rng = numpy_gen(derive_seed(spec.seed, "vnoise", spec.slide_index))
    eta = noise_rng.standard_normal((spec.N, spec.d_visual))
    if spec.visual_informative:
        sketch_rng = numpy_gen(derive_seed(spec.seed, "sketch"))
        m = sketch_rng.standard_normal((spec.d_visual, spec.G)) / math.sqrt(spec.G)
        visual = x0 @ m.T + VISUAL_NOISE * eta
    else:
        visual = eta
    sample = SlideSample(
        coords=_grid_coords(spec.N),
        visual=visual,
        expr=x0,
        gene_names=[f"g{i:04d}" for i in range(spec.G)],
        slide_id=f"synthetic-{spec.seed}-{spec.slide_index}",
    )
    return sample, a_star


def synth_cohort(spec: SyntheticSpec, n_slides: int) -> tuple[list[SlideSample], np.ndarray]:
    """Slides 0..n_slides-1 drawn from the same A* and visual sketch."""
    slides = []
    a_star = None
    for i in range(n_slides):
        sample, a_star = synth_slide(replace(spec, slide_index=i))
        slides.append(sample)
    return slides, a_star


# ---------------------------------------------------------------------------
# structured-text + float32 block I/O

def _encode_header(magic: str, fields: dict) -> bytes:
    lines = [magic]
    for key, value in fields.items():
        if isinstance(value, (list, tuple)):
            value = json.dumps(list(value))
        lines.append(f"{key}: {value}")
    return ("\n".join(lines) + "\n\n").encode("utf-8")


def _split_file(raw: bytes, magic: str, path) -> tuple[dict, bytes]:
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise FileFormatError(f"{path}: missing blank line after header")
    try:
        text = raw[:sep].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FileFormatError(f"{path}: header is not valid UTF-8") from exc
    lines = text.split("\n")
    if not lines or lines[0] != magic:
        raise FileFormatError(f"{path}: bad magic line, expected {magic!r}")
    fields = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        if ":" not in line:
            raise FileFormatError(f"{path}: malformed header line {line!r}")
        key, value = line.split(":", 1)
        fields[key.strip()] = value.strip()
    return fields, raw[sep + 2:]


def _field(fields: dict, name: str, path, convert=str):
    if name not in fields:
        raise FileFormatError(f"{path}: missing header field {name!r}")
    try:
        return convert(fields[name])
    except (ValueError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{path}: invalid value for field {name!r}") from exc


def _read_blocks(payload: bytes, blocks: list[tuple[str, tuple[int, ...]]], path):
    out = {}
    offset = 0
    for name, shape in blocks:
        count = int(np.prod(shape)) if shape else 0
        nbytes = count * 4
        if offset + nbytes > len(payload):
            raise FileFormatError(
                f"{path}: payload truncated in block {name!r} "
                f"(need {nbytes} bytes at offset {offset}, have {len(payload) - offset})"
            )
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        out[name] = arr.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise FileFormatError(f"{path}: {len(payload) - offset} unexpected trailing bytes")
    return out


def _pack(*arrays: np.ndarray) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)


def save_slide(path, sample: SlideSample) -> None:
    header = _encode_header(SLIDE_MAGIC, {
        "slide_id": sample.slide_id,
        "n_spots": sample.n_spots,
        "n_genes": sample.n_genes,
        "d_visual": sample.visual.shape[1],
        "gene_names": sample.gene_names,
    })
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(_pack(sample.coords, sample.visual, sample.expr))


def load_slide(path) -> SlideSample:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, payload = _split_file(raw, SLIDE_MAGIC, path)
    n = _field(fields, "n_spots", path, int)
    g = _field(fields, "n_genes", path, int)
    dv = _field(fields, "d_visual", path, int)
    names = _field(fields, "gene_names", path, json.loads)
    if n < 2:
        raise FileFormatError(f"{path}: n_spots must be >= 2, got {n}")
    if not isinstance(names, list) or len(names) != g:
        raise FileFormatError(
            f"{path}: gene_names length {len(names) if isinstance(names, list) else '?'} "
            f"does not match n_genes {g}"
        )
    blocks = _read_blocks(
        payload, [("coords", (n, 2)), ("visual", (n, dv)), ("expr", (n, g))], path
    )
    return SlideSample(
        coords=blocks["coords"], visual=blocks["visual"], expr=blocks["expr"],
        gene_names=[str(x) for x in names],
        slide_id=_field(fields, "slide_id", path),
    )


def save_predictions(path, matrix: np.ndarray, metadata: dict) -> None:
    """Predicted expression plus provenance (model, seed, steps, config hash)."""
    matrix = check_array(matrix, "predictions", ndim=2)
    fields = {
        "n_spots": matrix.shape[0],
        "n_genes": matrix.shape[1],
        **{k: metadata[k] for k in sorted(metadata)},
    }
    with open(path, "wb") as fh:
        fh.write(_encode_header(PRED_MAGIC, fields))
        fh.write(_pack(matrix))


def load_predictions(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, payload = _split_file(raw, PRED_MAGIC, path)
    n = _field(fields, "n_spots", path, int)
    g = _field(fields, "n_genes", path, int)
    blocks = _read_blocks(payload, [("expr", (n, g))], path)
    meta = {k: v for k, v in fields.items() if k not in ("n_spots", "n_genes")}
    return blocks["expr"], meta


def save_matrix(path, matrix: np.ndarray, name: str = "matrix") -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ContractError(f"{name} must be 2-d, got shape {matrix.shape}")
    with open(path, "wb") as fh:
        fh.write(_encode_header(MATRIX_MAGIC, {
            "name": name, "rows": matrix.shape[0], "cols": matrix.shape[1],
        }))
        fh.write(_pack(matrix))


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, payload = _split_file(raw, MATRIX_MAGIC, path)
    rows = _field(fields, "rows", path, int)
    cols = _field(fields, "cols", path, int)
    return _read_blocks(payload, [("matrix", (rows, cols))], path)["matrix"]


def save_gfm_embeddings(path, f_matrix: np.ndarray, gene_names: list[str],
                        source_tag: str = "unknown") -> None:
    """Binary float32 matrix plus a text sidecar at `<path>.meta`.

    All-zero rows denote genes the source model could not map; loaders
    mask them out of the alignment loss.
    """
    f_matrix = check_array(f_matrix, "embeddings", ndim=2)
    if len(gene_names) != f_matrix.shape[0]:
        raise ContractError(
            f"{len(gene_names)} gene names for {f_matrix.shape[0]} embedding rows"
        )
    with open(path, "wb") as fh:
        fh.write(_pack(f_matrix))
    sidecar = _encode_header(GFM_MAGIC, {
        "n_genes": f_matrix.shape[0],
        "d_e": f_matrix.shape[1],
        "source_tag": source_tag,
        "gene_names": gene_names,
    })
    with open(str(path) + ".meta", "wb") as fh:
        fh.write(sidecar)


def load_gfm_embeddings(path, expected_gene_names: list[str] | None = None):
    """Returns (F [G, d_e], valid mask, source_tag, gene_names)."""
    with open(str(path) + ".meta", "rb") as fh:
        raw = fh.read()
    fields, _ = _split_file(raw, GFM_MAGIC, str(path) + ".meta")
    g = _field(fields, "n_genes", path, int)
    d_e = _field(fields, "d_e", path, int)
    names = _field(fields, "gene_names", path, json.loads)
    if len(names) != g:
        raise FileFormatError(f"{path}: gene_names length does not match n_genes")
    with open(path, "rb") as fh:
        payload = fh.read()
    f = _read_blocks(payload, [("embeddings", (g, d_e))], path)["embeddings"]
    if expected_gene_names is not None and list(expected_gene_names) != list(names):
        raise FileFormatError(f"{path}: embedding gene names do not match the panel")
    valid = np.abs(f).sum(axis=1) > 0
    return f, valid, _field(fields, "source_tag", path), [str(x) for x in names]


def save_gene_panel(path, panel: GenePanel) -> None:
    header = _encode_header(PANEL_MAGIC, {
        "n_genes": len(panel.names),
        "k_search": panel.k_search,
        "names": panel.names,
        "indices": panel.indices,
        "means": [repr(float(x)) for x in panel.means],
        "stds": [repr(float(x)) for x in panel.stds],
    })
    with open(path, "wb") as fh:
        fh.write(header)


def load_gene_panel(path) -> GenePanel:
    with open(path, "rb") as fh:
        raw = fh.read()
    fields, _ = _split_file(raw, PANEL_MAGIC, path)
    names = _field(fields, "names", path, json.loads)
    indices = _field(fields, "indices", path, json.loads)
    means = np.array([float(x) for x in _field(fields, "means", path, json.loads)])
    stds = np.array([float(x) for x in _field(fields, "stds", path, json.loads)])
    if not (len(names) == len(indices) == len(means) == len(stds)):
        raise FileFormatError(f"{path}: names/indices/means/stds lengths disagree")
    return GenePanel(
        names=[str(x) for x in names], indices=[int(i) for i in indices],
        means=means, stds=stds, k_search=_field(fields, "k_search", path, int),
    )
