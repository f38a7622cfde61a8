####################################### IMPORT #################################
import json

import uvicorn
from fastapi import FastAPI, status
from fastapi.exceptions import HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import RedirectResponse
from loguru import logger

from app import (
    VERSION,
    build_schedule_set,
    decompose_report,
    rate_vector,
    run_experiment,
    setup_logger,
)
from config import settings
from schemas import (
    CapacityMarginRequest,
    CapacityMarginResponse,
    DecomposeRequest,
    DecomposeResponse,
    ExperimentConfig,
    HealthCheckResponse,
    SimulateResponse,
    TopologySpec,
)
from services.errors import SchedulingError
from services.polytope import polytope_service
from services.simulator import simulation_service

####################################### logger #################################

setup_logger()
logger.info("SYL Scheduler {} ({})", VERSION, settings.ENVIRONMENT)

###################### FastAPI Setup #############################

# title
app = FastAPI(
    title="SYL Scheduler - Scheduling Simulator API",
    description="""
    API do simulador de escalonamento em tempo discreto.

    ## Funcionalidades

    * **Healthcheck**: Verifica o status do serviço
    * **Decomposição**: Pertinência a conv(S) e decomposição de Birkhoff de uma matriz de taxas
    * **Margem de capacidade**: Maior eta com lambda + eta*1 na região de capacidade
    * **Simulação**: Executa um config de experimento (horizonte limitado) e devolve os resumos
    """,
    version=VERSION,
    contact={
        "name": "SYL Scheduler",
    },
    license_info={
        "name": "MIT",
    },
)

origins = settings.CORS_ORIGINS.split(",") if "," in settings.CORS_ORIGINS else [settings.CORS_ORIGINS]

app.add_middleware(
    CORSMiddleware,
    allow_origins=origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


# redirect
@app.get("/", include_in_schema=False)
async def redirect():
    return RedirectResponse("/docs")


@app.get(
    '/healthcheck',
    status_code=status.HTTP_200_OK,
    response_model=HealthCheckResponse,
    summary="Verificar status do serviço",
    tags=["Monitoramento"]
)
def perform_healthcheck():
    """
    Verifica o status do serviço.

    Returns:
        HealthCheckResponse: Resposta indicando que o serviço está funcionando
    """
    return {'healthcheck': 'Everything OK!'}


######################### Scheduling #################################

@app.post(
    "/decompose",
    response_model=DecomposeResponse,
    summary="Decomposição de Birkhoff",
    description="""
    Verifica se a matriz pertence a conv(S) do crossbar n x n e devolve a combinação
    convexa de permutações (mais a matriz nula quando as somas de linha são < 1).
    Com `lam`, devolve também a margem de capacidade eta*.
    """,
    tags=["Politopo"]
)
def decompose(request: DecomposeRequest):
    try:
        report = decompose_report(request.matrix, request.lam)
        logger.info("decompose: member={} terms={}", report["member"], len(report["terms"]))
        return report
    except SchedulingError as e:
        logger.error("Error decomposing matrix: {}", str(e))
        raise HTTPException(status_code=400, detail=f"Error decomposing matrix: {str(e)}")


@app.post(
    "/capacity_margin",
    response_model=CapacityMarginResponse,
    summary="Margem de capacidade",
    tags=["Politopo"]
)
def capacity_margin(request: CapacityMarginRequest):
    try:
        topology = request.topology
        if topology is None:
            n = len(request.rates)
            topology = TopologySpec(kind="crossbar", n=n)
        schedule_set = build_schedule_set(topology)
        lam = rate_vector(request.rates, schedule_set)
        margin = polytope_service.capacity_margin(lam, schedule_set, tol=settings.MARGIN_BISECTION_TOL)
        return {"eta_star": margin.eta_star, "feasible": margin.feasible}
    except SchedulingError as e:
        logger.error("Error computing capacity margin: {}", str(e))
        raise HTTPException(status_code=400, detail=f"Error computing capacity margin: {str(e)}")


@app.post(
    "/simulate",
    response_model=SimulateResponse,
    summary="Simular um config de experimento",
    description=f"""
    Executa todas as políticas do config sobre o mesmo caminho de chegadas.
    O horizonte é limitado a API_MAX_HORIZON slots ({settings.API_MAX_HORIZON} por padrão).
    """,
    tags=["Simulação"]
)
def simulate(config: ExperimentConfig):
    if config.horizon > settings.API_MAX_HORIZON:
        raise HTTPException(
            status_code=400,
            detail=f"horizon {config.horizon} exceeds the API limit of {settings.API_MAX_HORIZON} slots",
        )
    try:
        results = run_experiment(config)
        report = simulation_service.delay_report(results, slot_scale=config.delay_scale)
        summaries = [
            {key: value for key, value in result.summary().items()
             if key in ("policy", "mean_backlog", "final_backlog", "plateau_ratio", "mean_delay")}
            for result in results
        ]
        logger.info("simulate: {}", [(s["policy"], s["mean_backlog"]) for s in summaries])
        return {"results": summaries, "delay_report": json.loads(report.to_json(orient="records"))}
    except SchedulingError as e:
        logger.error("Error running simulation: {}", str(e))
        raise HTTPException(status_code=400, detail=f"Error running simulation: {str(e)}")


def run_server():
    """Sobe o uvicorn com HOST, PORT e RELOAD das configurações"""
    uvicorn.run("main:app", host=settings.HOST, port=settings.PORT, reload=settings.RELOAD)


if __name__ == "__main__":
    run_server()
