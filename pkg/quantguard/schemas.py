"""On-disk formats: model files, quantized model files, anchors, run manifests and reports."""
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator


class LayerFile(BaseModel):
    weights: list[list[float]]
    bias: list[float]
    activation: Literal['relu', 'identity'] = 'relu'


class NetworkFile(BaseModel):
    input_dim: int = Field(..., ge=1)
    layers: list[LayerFile] = Field(..., min_length=1)


class QuantizedLayerFile(LayerFile):
    bits: int = Field(..., ge=2)
    scale: float = Field(..., gt=0)
    q_weights: list[list[int]]
    q_bias: list[int]


class QuantizedNetworkFile(BaseModel):
    input_dim: int = Field(..., ge=1)
    layers: list[QuantizedLayerFile] = Field(..., min_length=1)
    bits: list[int]
    scales: list[float]


Domain = tuple[float, float]


def _check_domain(value: Domain | None) -> Domain | None:
    if value is not None and not value[0] < value[1]:
        raise ValueError(f'domain lower bound {value[0]} must be below its upper bound {value[1]}')
    return value


class AnchorFile(BaseModel):
    input: list[float] = Field(..., min_length=1)
    epsilon: float | None = Field(None, ge=0)
    free_mask: list[int] | Literal['all'] = 'all'
    # None: the run's domain applies
    domain: Domain | None = None

    @field_validator('domain')
    @classmethod
    def _ordered_domain(cls, value):
        return _check_domain(value)

    @field_validator('free_mask')
    @classmethod
    def _unique_mask(cls, value):
        if value != 'all' and len(set(value)) != len(value):
            raise ValueError('free_mask contains duplicate indices')
        return value


class RunManifest(BaseModel):
    """Everything a ``quantize`` run depends on; recorded verbatim in its report."""

    model_config = ConfigDict(extra='forbid')

    model: str
    anchors: str
    dataset: str | None = None
    eps: float | None = Field(None, ge=0)
    nmin: int = Field(2, ge=2)
    nmax: int = Field(52, ge=2, le=52)
    generations_per_layer: int = Field(110, ge=1)
    population: int = Field(5, ge=2)
    mutation_rate: float | None = Field(None, ge=0, le=1)
    crossover_rate: float = Field(0.9, ge=0, le=1)
    seed: int = 0
    budget_secs: float | None = Field(None, gt=0)
    max_iterations: int | None = Field(None, ge=1)
    mode: Literal['anchor', 'pairwise'] = 'anchor'
    min_box_width: float | None = Field(None, gt=0)
    max_subproblems: int | None = Field(None, ge=1)
    initial_counter_examples: int | None = Field(None, ge=0)
    # input box applied to every anchor ball; None disables clipping
    domain: Domain | None = (0.0, 1.0)
    out: str | None = None

    @field_validator('domain')
    @classmethod
    def _ordered_domain(cls, value):
        return _check_domain(value)

    @field_validator('nmax')
    @classmethod
    def _bounds_ordered(cls, value, info):
        nmin = info.data.get('nmin', 2)
        if value < nmin:
            raise ValueError(f'nmax ({value}) must be >= nmin ({nmin})')
        return value


class PropertyReport(BaseModel):
    index: int
    verdict: Literal['equivalent', 'counter_example', 'unknown']
    reference_class: int
    counter_example: list[float] | None = None
    quantized_class: int | None = None
    reason: str | None = None
    subproblems: int


class RunReport(BaseModel):
    model: str
    features: int
    properties: int
    iterations: int
    bits_per_layer: list[int] | None
    status: Literal['solved', 'failed', 'timeout']
    counter_examples: list[list[float]]
    per_property: list[PropertyReport]
    seed: int
    manifest: RunManifest


class AccuracyRow(BaseModel):
    model: str
    bits: list[int] | None
    ref_acc: float
    quant_acc: float
    acc_drop: float
