"""Surrogate prediction API."""

import logging

from fastapi import APIRouter, Depends, HTTPException
from pydantic import BaseModel, Field

from app.errors import MeshsimError
from app.services.prediction_service import Predictor

logger = logging.getLogger(__name__)

router = APIRouter()

_state = {"predictor": None, "error": "no checkpoint loaded"}


class HoleBody(BaseModel):
    shape: str = "circle"
    center: tuple[float, float]
    diameter: float = 5.0


class PredictBody(BaseModel):
    holes: list[HoleBody] = Field(default_factory=list)
    angle: float = 0.0
    force: float = 300.0
    force_line: float | None = None
    reference: bool = False


def load_predictor(checkpoint_path: str) -> Predictor | None:
    """Load the served checkpoint; a failure is kept and reported by /health."""
    _state["predictor"] = None
    _state["error"] = None
    if not checkpoint_path:
        _state["error"] = "MESHSIM_CHECKPOINT is not set"
        return None
    try:
        _state["predictor"] = Predictor(checkpoint_path)
    except (OSError, ValueError, KeyError) as e:
        logger.error(f"Could not load checkpoint {checkpoint_path}: {e}")
        _state["error"] = f"{type(e).__name__}: {e}"
    return _state["predictor"]


def set_predictor(predictor: Predictor | None) -> None:
    _state["predictor"] = predictor
    _state["error"] = None if predictor is not None else "no checkpoint loaded"


def get_predictor() -> Predictor:
    predictor = _state["predictor"]
    if predictor is None:
        raise HTTPException(status_code=503, detail={"error": "Unavailable",
                                                     "message": _state["error"] or "no checkpoint loaded"})
    return predictor


@router.get("/health")
def health():
    predictor = _state["predictor"]
    if predictor is None:
        return {"status": "unavailable", "error": _state["error"]}
    config = predictor.params.config
    return {
        "status": "ok",
        "checkpoint": predictor.checkpoint_path,
        "R": config.R,
        "K": config.K,
        "sampling_mode": config.sampling_mode,
        "propagation_mode": predictor.run_config.propagation_mode,
    }


@router.post("/predict")
def predict(body: PredictBody, predictor: Predictor = Depends(get_predictor)):
    """Per-node von Mises prediction for one beam geometry and load."""
    try:
        result = predictor.predict(**body.model_dump())
    except (MeshsimError, ValueError) as e:
        raise HTTPException(status_code=422, detail={"error": type(e).__name__, "message": str(e)})
    return result.to_dict()
