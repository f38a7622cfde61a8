"""
Schemas Pydantic para validação dos configs de experimento e documentação da API
"""
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, Field, root_validator, validator

from services.policies import POLICY_KINDS


SCHEMA_VERSION = 1

Rates = Union[List[List[float]], List[float]]


class StrictModel(BaseModel):
    class Config:
        extra = "forbid"


class TopologySpec(StrictModel):
    """Crossbar n x n ou lista explícita de schedules"""
    kind: str = Field(..., description="crossbar ou explicit", example="crossbar")
    n: Optional[int] = Field(None, description="Portas do crossbar", example=3, ge=1)
    schedules: Optional[List[List[int]]] = Field(None, description="Schedules explícitos", example=[[1, 0], [0, 1], [0, 0]])

    @root_validator(skip_on_failure=True)
    def check_kind(cls, values):
        kind = values.get("kind")
        if kind == "crossbar":
            if values.get("n") is None:
                raise ValueError("crossbar topology needs 'n'")
            if values.get("schedules") is not None:
                raise ValueError("crossbar topology does not take 'schedules'")
        elif kind == "explicit":
            if not values.get("schedules"):
                raise ValueError("explicit topology needs a non-empty 'schedules' list")
        else:
            raise ValueError(f"unknown topology kind '{kind}', expected crossbar or explicit")
        return values


class TrafficSpec(StrictModel):
    """Taxas Bernoulli tau * rates / normalizer"""
    rates: Rates = Field(..., description="Taxas base (matriz n x n ou vetor)", example=[[0.6, 0.3, 0.0], [0.1, 0.0, 0.8], [0.2, 0.6, 0.1]])
    tau: float = Field(1.0, description="Fator de carga", example=0.95, ge=0.0)
    normalizer: float = Field(1.0, description="Divisor da taxa base", example=0.9, gt=0.0)


class PolicySpec(StrictModel):
    """Política a simular; índices de fila e fluxo são 1-indexados"""
    kind: str = Field(..., description="Tipo da política", example="syl")
    name: Optional[str] = Field(None, description="Rótulo único na execução", example="syl")
    objective: Optional[str] = Field(None, description="quadratic ou slack (SYL)", example="slack")
    center: Optional[Rates] = Field(None, description="Centro c do objetivo quadrático")
    modulus: Optional[float] = Field(None, description="Módulo m do objetivo quadrático", gt=0.0)
    max_iters: Optional[int] = Field(None, description="Iterações de Frank-Wolfe", ge=1)
    gap_tol: Optional[float] = Field(None, description="Tolerância do gap de Frank-Wolfe", gt=0.0)
    refresh_tol: Optional[float] = Field(None, description="Variação de mu_bar que força nova decomposição", gt=0.0)
    budget: int = Field(100, description="Tokens (syl_tokens)", ge=0)
    sensitive_flow: Optional[List[int]] = Field(None, description="Fluxo sensível: [linha, coluna] ou [fila]", example=[1, 2])
    order: Optional[List[int]] = Field(None, description="Prioridade das filas (priority)", example=[2, 1])
    target: Optional[Rates] = Field(None, description="Alvo explícito (randomized_known)")

    @validator("kind")
    def check_kind(cls, kind):
        if kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy '{kind}', expected one of {list(POLICY_KINDS)}")
        return kind

    @property
    def label(self) -> str:
        return self.name or self.kind


class SweepSpec(StrictModel):
    taus: List[float] = Field(..., description="Valores de tau", example=[0.9, 0.93, 0.96, 0.99])
    seeds: List[int] = Field([0], description="Seeds por célula", example=[0, 1, 2])

    @validator("taus", each_item=True)
    def check_tau(cls, tau):
        if tau < 0:
            raise ValueError("tau must be non-negative")
        return tau


class ExperimentConfig(StrictModel):
    """Config versionado de um experimento (schema_version 1)"""
    schema_version: int = Field(SCHEMA_VERSION, description="Versão do schema", example=1)
    name: Optional[str] = Field(None, description="Nome do experimento", example="expA")
    topology: TopologySpec
    traffic: TrafficSpec
    policies: List[PolicySpec] = Field(..., min_items=1)
    horizon: int = Field(..., description="Slots simulados", example=100000, ge=1)
    seed: int = Field(0, description="Seed da execução", ge=0)
    warmup: int = Field(0, description="Slots fora das estatísticas de atraso", ge=0)
    delay_scale: float = Field(1.0, description="Divisor dos atrasos no relatório", gt=0.0)
    sweep: Optional[SweepSpec] = None

    @validator("schema_version")
    def check_version(cls, version):
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {version}, expected {SCHEMA_VERSION}")
        return version

    @validator("policies")
    def check_unique_names(cls, policies):
        labels = [policy.label for policy in policies]
        if len(set(labels)) != len(labels):
            raise ValueError(f"policy names must be unique, got {labels}")
        return policies


class HealthCheckResponse(BaseModel):
    """Resposta do healthcheck"""
    healthcheck: str = Field(..., description="Status do serviço", example="Everything OK!")

    class Config:
        schema_extra = {
            "example": {
                "healthcheck": "Everything OK!"
            }
        }


class DecomposeRequest(BaseModel):
    """Matriz a decompor e, opcionalmente, uma taxa de chegadas para a margem"""
    matrix: List[List[float]] = Field(..., description="Matriz n x n de taxas", example=[[1, 0], [0, 1]])
    lam: Optional[List[List[float]]] = Field(None, description="Taxa de chegadas para eta*")


class DecompositionTerm(BaseModel):
    weight: float = Field(..., description="Peso theta_j", example=0.6333333333333333)
    schedule: List[List[int]] = Field(..., description="Matriz de permutação (ou nula)")


class DecomposeResponse(BaseModel):
    """Veredito de pertinência e combinação convexa"""
    member: bool = Field(..., description="A matriz pertence a conv(S)", example=True)
    terms: List[DecompositionTerm] = Field(..., description="Termos da combinação")
    residual: Optional[float] = Field(None, description="Resíduo de reconstrução (l-infinito)", example=1e-16)
    eta_star: Optional[float] = Field(None, description="Margem de capacidade de lam", example=0.0333)


class CapacityMarginRequest(BaseModel):
    rates: Rates = Field(..., description="Taxa de chegadas", example=[[0.6, 0.3, 0.0], [0.1, 0.0, 0.8], [0.2, 0.6, 0.1]])
    topology: Optional[TopologySpec] = Field(None, description="Padrão: crossbar do tamanho da matriz")


class CapacityMarginResponse(BaseModel):
    eta_star: float = Field(..., description="Maior eta com lam + eta*1 na região de capacidade", example=0.0333)
    feasible: bool = Field(..., description="lam está na região de capacidade", example=True)


class PolicySummary(BaseModel):
    policy: str = Field(..., example="syl")
    mean_backlog: float = Field(..., description="Backlog agregado médio", example=4.2)
    final_backlog: int = Field(..., description="Backlog agregado no último slot", example=3)
    plateau_ratio: Optional[float] = Field(None, description="Razão entre as duas últimas janelas de 10%", example=1.02)
    mean_delay: List[Optional[float]] = Field(..., description="Atraso médio por fluxo (slots)")


class SimulateResponse(BaseModel):
    results: List[PolicySummary]
    delay_report: List[Dict[str, Any]] = Field(..., description="Histogramas normalizados por fluxo e política")
