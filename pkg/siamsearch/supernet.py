"""
Searchable cells, the relaxed mixed operation, and discrete genotypes.

A cell is a linear sequence of mixed layers. Each mixed layer owns one block
per candidate kind plus a vector of architecture weights (alpha); its output
is the softmax(alpha)-weighted sum of the block outputs. After search the
argmax kind of every layer forms the genotype, which materialize() turns into
a plain stack of freshly initialised blocks.
"""

import json
import logging
from collections import Counter
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from typing import Any, Protocol

import numpy as np

from .autograd import BatchNormState, Mode, Tensor, parameter, softmax, weighted_sum
from .backbone import TinyBackbone
from .errors import ConfigError, CorruptedSearchError, GenotypeError, ShapeError
from .ops import (
    LayerBlock,
    LinearAdapter,
    OperationKind,
    SearchSpace,
    block_forward,
    catalog,
    instantiate_block,
)

logger = logging.getLogger(__name__)

ALPHA_INIT_SCALE = 1e-3


class CellRole(StrEnum):
    ENCODER = "encoder"
    PREDICTOR = "predictor"


MAX_DEPTH = {CellRole.ENCODER: 6, CellRole.PREDICTOR: 4}


@dataclass(frozen=True)
class CellDims:
    """Input, hidden and output widths of a head."""

    input: int
    hidden: int
    output: int

    def layer_dims(self, depth: int) -> list[tuple[int, int]]:
        if depth == 1:
            return [(self.input, self.output)]
        return [(self.input, self.hidden)] + [(self.hidden, self.hidden)] * (depth - 2) + [(self.hidden, self.output)]


def _check_depth(role: CellRole, depth: int) -> None:
    if not 1 <= depth <= MAX_DEPTH[role]:
        raise ConfigError(f"{role} depth must lie in [1, {MAX_DEPTH[role]}], got {depth}")


def _check_dims(dims: CellDims) -> None:
    if min(dims.input, dims.hidden, dims.output) < 1:
        raise ConfigError(f"head widths must be positive, got {dims}")


def _build_block(
    kind: OperationKind,
    dim_in: int,
    dim_out: int,
    is_predictor_final: bool,
    rng: np.random.Generator,
) -> LayerBlock:
    # width-preserving kinds run at dim_in and rely on the layer adapter
    block_out = dim_in if kind.preserves_width else dim_out
    return instantiate_block(kind, dim_in, block_out, is_predictor_final, rng)


@dataclass
class MixedLayer:
    kinds: tuple[OperationKind, ...]
    blocks: list[LayerBlock]
    alpha: Tensor
    dim_in: int
    dim_out: int
    adapter: LinearAdapter | None = None

    def weights(self) -> list[Tensor]:
        params = [p for block in self.blocks for p in block.parameters()]
        if self.adapter is not None:
            params += self.adapter.parameters()
        return params

    def block_output(self, block: LayerBlock, x: Tensor, mode: Mode) -> Tensor:
        y = block_forward(block, x, mode)
        if block.dim_out != self.dim_out:
            y = self.adapter.forward(y)
        return y

    def forward(self, x: Tensor, mode: Mode = Mode.TRAIN) -> Tensor:
        return mixed_forward(self, x, mode)


@dataclass
class MixedCell:
    role: CellRole
    layers: list[MixedLayer]
    dims: CellDims
    space: SearchSpace

    @property
    def depth(self) -> int:
        return len(self.layers)

    def parameters(self) -> list[Tensor]:
        """Model weights w; architecture weights are excluded."""
        return [p for layer in self.layers for p in layer.weights()]

    def alphas(self) -> list[Tensor]:
        return [layer.alpha for layer in self.layers]

    def bn_blocks(self) -> list[LayerBlock]:
        return [b for layer in self.layers for b in layer.blocks if b.bn_state is not None]

    def forward(self, x: Tensor, mode: Mode = Mode.TRAIN) -> Tensor:
        return cell_forward(self, x, mode)


def build_cell(
    role: CellRole | str,
    depth: int,
    dims: CellDims,
    space: SearchSpace | str = SearchSpace.S,
    seed: int | np.random.Generator = 0,
) -> MixedCell:
    """One block per catalog kind in every layer; alphas start near zero."""
    role, space = CellRole(role), SearchSpace(space)
    _check_depth(role, depth)
    _check_dims(dims)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    kinds = catalog(space)
    layer_dims = dims.layer_dims(depth)
    layers = []
    for i, (dim_in, dim_out) in enumerate(layer_dims):
        predictor_final = role is CellRole.PREDICTOR and i == depth - 1
        blocks = [_build_block(k, dim_in, dim_out, predictor_final, rng) for k in kinds]
        adapter = None
        if dim_in != dim_out and any(k.preserves_width for k in kinds):
            adapter = LinearAdapter.create(dim_in, dim_out, rng)
        alpha = parameter(rng.normal(0.0, ALPHA_INIT_SCALE, size=len(kinds)), name=f"{role}.alpha{i}")
        layers.append(MixedLayer(kinds, blocks, alpha, dim_in, dim_out, adapter))
    logger.debug("built %s cell: %d layers x %d kinds", role, depth, len(kinds))
    return MixedCell(role, layers, dims, space)


def mixed_forward(layer: MixedLayer, x: Tensor, mode: Mode = Mode.TRAIN) -> Tensor:
    """Σ_k softmax(alpha)_k · o_k(x)."""
    if x.ndim != 2 or x.shape[1] != layer.dim_in:
        raise ShapeError(f"mixed layer expects width {layer.dim_in}", x.shape)
    outputs = [layer.block_output(block, x, mode) for block in layer.blocks]
    return weighted_sum(softmax(layer.alpha), outputs)


def cell_forward(cell: MixedCell, x: Tensor, mode: Mode = Mode.TRAIN) -> Tensor:
    for layer in cell.layers:
        x = mixed_forward(layer, x, mode)
    return x


def alpha_snapshot(cell: MixedCell) -> list[list[float]]:
    """Per-layer softmax(alpha) as plain floats."""
    snapshot = []
    for layer in cell.layers:
        a = layer.alpha.data.astype(np.float64)
        e = np.exp(a - a.max())
        snapshot.append((e / e.sum()).tolist())
    return snapshot


# genotypes


@dataclass(frozen=True)
class Genotype:
    encoder: tuple[OperationKind, ...]
    predictor: tuple[OperationKind, ...] | None
    space: SearchSpace = SearchSpace.S
    seed: int = 0
    search_epochs: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder", tuple(OperationKind.from_name(k) for k in self.encoder))
        if self.predictor is not None:
            object.__setattr__(self, "predictor", tuple(OperationKind.from_name(k) for k in self.predictor))
        object.__setattr__(self, "space", SearchSpace(self.space))

    def cells(self) -> list[tuple[CellRole, tuple[OperationKind, ...]]]:
        cells = [(CellRole.ENCODER, self.encoder)]
        if self.predictor is not None:
            cells.append((CellRole.PREDICTOR, self.predictor))
        return cells

    def all_ops(self) -> list[OperationKind]:
        return [k for _, ops in self.cells() for k in ops]


def reference_genotype() -> Genotype:
    """Hand-designed baseline heads: 3-layer projector, 2-layer predictor ending in a plain linear."""
    relu = OperationKind.LIN_BN_RELU
    return Genotype(encoder=(relu, relu, relu), predictor=(relu, relu), space=SearchSpace.S)


def _argmax_kind(layer: MixedLayer, role: CellRole, index: int) -> OperationKind:
    alpha = layer.alpha.data
    if not np.isfinite(alpha).all():
        raise CorruptedSearchError(
            f"non-finite alpha in {role} layer {index}",
            {"role": str(role), "layer": index, "alpha": alpha.tolist()},
        )
    # np.argmax breaks ties to the lowest index
    return layer.kinds[int(np.argmax(alpha))]


def parse_genotype(
    encoder: MixedCell,
    predictor: MixedCell | None = None,
    seed: int = 0,
    search_epochs: int = 0,
) -> Genotype:
    """Select the argmax kind of every layer of each searched cell."""
    enc_ops = tuple(_argmax_kind(layer, encoder.role, i) for i, layer in enumerate(encoder.layers))
    pred_ops = None
    if predictor is not None:
        pred_ops = tuple(_argmax_kind(layer, predictor.role, i) for i, layer in enumerate(predictor.layers))
    return Genotype(enc_ops, pred_ops, encoder.space, seed, search_epochs)


def validate_genotype(g: Genotype) -> None:
    allowed = set(catalog(g.space))
    for role, ops in g.cells():
        if not 1 <= len(ops) <= MAX_DEPTH[role]:
            raise GenotypeError(f"{role} genotype length {len(ops)} outside [1, {MAX_DEPTH[role]}]")
        foreign = [str(k) for k in ops if k not in allowed]
        if foreign:
            raise GenotypeError(f"{role} genotype uses {foreign} outside space {g.space}")


def skip_fraction(g: Genotype) -> float:
    ops = g.all_ops()
    if not ops:
        return 0.0
    return sum(k is OperationKind.IDENTITY for k in ops) / len(ops)


def composition(g: Genotype) -> dict[str, dict[str, int]]:
    """Per-cell count of every kind, in canonical order."""
    result = {}
    for role, ops in g.cells():
        counts = Counter(ops)
        result[str(role)] = {str(k): counts.get(k, 0) for k in OperationKind}
    return result


def genotype_to_json(g: Genotype) -> dict[str, Any]:
    return {
        "encoder": [str(k) for k in g.encoder],
        "predictor": None if g.predictor is None else [str(k) for k in g.predictor],
        "space": str(g.space),
        "seed": g.seed,
        "search_epochs": g.search_epochs,
    }


def genotype_from_json(data: dict[str, Any]) -> Genotype:
    expected = {"encoder", "predictor", "space", "seed", "search_epochs"}
    if set(data) != expected:
        raise GenotypeError(f"genotype fields must be exactly {sorted(expected)}, got {sorted(data)}")
    try:
        g = Genotype(
            encoder=tuple(data["encoder"]),
            predictor=None if data["predictor"] is None else tuple(data["predictor"]),
            space=data["space"],
            seed=int(data["seed"]),
            search_epochs=int(data["search_epochs"]),
        )
    except (TypeError, ValueError) as e:
        raise GenotypeError(f"invalid genotype: {e}") from e
    validate_genotype(g)
    return g


def save_genotype(g: Genotype, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(genotype_to_json(g), indent=2) + "\n")
    return path


def load_genotype(path: Path | str) -> Genotype:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise GenotypeError(f"{path}: not valid JSON ({e})") from e
    return genotype_from_json(data)


# materialized heads


@dataclass
class HeadLayer:
    block: LayerBlock
    adapter: LinearAdapter | None = None

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        y = block_forward(self.block, x, mode)
        return self.adapter.forward(y) if self.adapter is not None else y


@dataclass
class MaterializedHead:
    """Discrete stack of blocks; identity layers that keep the width are dropped."""

    role: CellRole
    ops: tuple[OperationKind, ...]
    layers: list[HeadLayer]
    dims: CellDims

    @property
    def depth(self) -> int:
        return len(self.ops)

    @property
    def effective_depth(self) -> int:
        return sum(k is not OperationKind.IDENTITY for k in self.ops)

    def parameters(self) -> list[Tensor]:
        params = []
        for layer in self.layers:
            params += layer.block.parameters()
            if layer.adapter is not None:
                params += layer.adapter.parameters()
        return params

    def bn_blocks(self) -> list[LayerBlock]:
        return [layer.block for layer in self.layers if layer.block.bn_state is not None]

    def forward(self, x: Tensor, mode: Mode = Mode.TRAIN) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x


def _materialize_cell(
    role: CellRole, ops: tuple[OperationKind, ...], dims: CellDims, rng: np.random.Generator
) -> MaterializedHead:
    _check_depth(role, len(ops))
    layers = []
    for i, (kind, (dim_in, dim_out)) in enumerate(zip(ops, dims.layer_dims(len(ops)))):
        predictor_final = role is CellRole.PREDICTOR and i == len(ops) - 1
        adapter = None
        if kind.preserves_width and dim_in != dim_out:
            adapter = LinearAdapter.create(dim_in, dim_out, rng)
        if kind is OperationKind.IDENTITY and adapter is None:
            continue
        block = _build_block(kind, dim_in, dim_out, predictor_final, rng)
        layers.append(HeadLayer(block, adapter))
    return MaterializedHead(role, ops, layers, dims)


def materialize(
    g: Genotype,
    encoder_dims: CellDims,
    predictor_dims: CellDims | None = None,
    seed: int | np.random.Generator = 0,
) -> tuple[MaterializedHead, MaterializedHead | None]:
    """Fresh-parameter heads for a genotype."""
    validate_genotype(g)
    _check_dims(encoder_dims)
    if g.predictor is not None:
        if predictor_dims is None:
            raise GenotypeError("genotype has a predictor but no predictor dims were given")
        _check_dims(predictor_dims)
        if predictor_dims.input != encoder_dims.output or predictor_dims.output != encoder_dims.output:
            raise GenotypeError(
                f"predictor dims {predictor_dims} incompatible with encoder output {encoder_dims.output}"
            )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    encoder = _materialize_cell(CellRole.ENCODER, g.encoder, encoder_dims, rng)
    predictor = None
    if g.predictor is not None:
        predictor = _materialize_cell(CellRole.PREDICTOR, g.predictor, predictor_dims, rng)
    return encoder, predictor


# whole networks


class Head(Protocol):
    def forward(self, x: Tensor, mode: Mode = ...) -> Tensor: ...

    def parameters(self) -> list[Tensor]: ...

    def bn_blocks(self) -> list[LayerBlock]: ...


@dataclass
class SiameseNetwork:
    """Backbone plus encoder head and optional predictor, shared by both branches."""

    backbone: TinyBackbone
    encoder: Head
    predictor: Head | None = None

    def parameters(self) -> list[Tensor]:
        params = self.backbone.parameters() + self.encoder.parameters()
        if self.predictor is not None:
            params += self.predictor.parameters()
        return params

    def bn_states(self) -> list[BatchNormState]:
        heads = [h for h in (self.encoder, self.predictor) if h is not None]
        return self.backbone.bn_states() + [b.bn_state for h in heads for b in h.bn_blocks()]


@dataclass
class SiameseSupernet:
    """Backbone plus searchable cells; alphas are kept apart from the weights w."""

    backbone: TinyBackbone
    encoder: MixedCell
    predictor: MixedCell | None = None

    def parameters(self) -> list[Tensor]:
        """Model weights w: backbone and every candidate block."""
        params = self.backbone.parameters() + self.encoder.parameters()
        if self.predictor is not None:
            params += self.predictor.parameters()
        return params

    def weights(self) -> list[Tensor]:
        return self.parameters()

    def alphas(self) -> list[Tensor]:
        alphas = self.encoder.alphas()
        if self.predictor is not None:
            alphas += self.predictor.alphas()
        return alphas

    def cells(self) -> list[MixedCell]:
        return [c for c in (self.encoder, self.predictor) if c is not None]

    def genotype(self, seed: int = 0, search_epochs: int = 0) -> Genotype:
        return parse_genotype(self.encoder, self.predictor, seed, search_epochs)


def build_supernet(
    backbone: TinyBackbone,
    encoder_depth: int,
    predictor_depth: int | None,
    hidden_dim: int,
    out_dim: int,
    space: SearchSpace | str = SearchSpace.S,
    seed: int | np.random.Generator = 0,
) -> SiameseSupernet:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    encoder = build_cell(
        CellRole.ENCODER, encoder_depth, CellDims(backbone.feature_dim, hidden_dim, out_dim), space, rng
    )
    predictor = None
    if predictor_depth:
        predictor = build_cell(
            CellRole.PREDICTOR, predictor_depth, CellDims(out_dim, hidden_dim, out_dim), space, rng
        )
    return SiameseSupernet(backbone=backbone, encoder=encoder, predictor=predictor)
