import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI

from app.config import RUNTIME_CONFIG
from app.routers import predict as predict_router

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app):
    if RUNTIME_CONFIG["checkpoint"]:
        predict_router.load_predictor(RUNTIME_CONFIG["checkpoint"])
    yield


app = FastAPI(title="meshsim surrogate", lifespan=lifespan)

app.include_router(predict_router.router)

if __name__ == "__main__":
    import uvicorn
    logging.basicConfig(level=RUNTIME_CONFIG["log_level"])
    uvicorn.run(app, host="0.0.0.0", port=5000)
