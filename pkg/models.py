import os

from sqlalchemy import create_engine, Column, Integer, String, Text, ForeignKey, DateTime, Float
from sqlalchemy.orm import declarative_base, sessionmaker, relationship, Session
from datetime import datetime

from app.config import RUNTIME_CONFIG

Base = declarative_base()


RUN_STATUS_RUNNING = "RUNNING"
RUN_STATUS_COMPLETED = "COMPLETED"
RUN_STATUS_ABORTED = "ABORTED"
VALID_RUN_STATUSES = [RUN_STATUS_RUNNING, RUN_STATUS_COMPLETED, RUN_STATUS_ABORTED]

METRIC_SPLIT_TRAIN = "train"
METRIC_SPLIT_VAL = "val"
METRIC_SPLIT_TEST = "test"
VALID_METRIC_SPLITS = [METRIC_SPLIT_TRAIN, METRIC_SPLIT_VAL, METRIC_SPLIT_TEST]


class TrainingRun(Base):
    """One training run of one configuration and seed."""
    __tablename__ = "training_runs"

    id = Column(Integer, primary_key=True)
    run_id = Column(String(255), unique=True, nullable=False, index=True)
    name = Column(String(255), nullable=False)
    sampling_mode = Column(String(20), nullable=False)
    propagation_mode = Column(String(20), nullable=False)
    R = Column(Integer, nullable=False)
    K = Column(Integer, nullable=False)
    total_steps = Column(Integer, nullable=True)  # null = tuned schedule, unbudgeted
    seed = Column(Integer, nullable=False)
    epochs = Column(Integer, nullable=False)
    status = Column(String(20), nullable=False, default=RUN_STATUS_RUNNING)

    params = Column(Integer, nullable=True)
    flops = Column(Integer, nullable=True)
    best_epoch = Column(Integer, nullable=True)
    best_val_rmse = Column(Float, nullable=True)
    test_rmse = Column(Float, nullable=True)

    checkpoint_path = Column(Text, nullable=True)
    config_json = Column(Text, nullable=True)
    error_message = Column(Text, nullable=True)
    started_at = Column(DateTime, default=datetime.utcnow)
    finished_at = Column(DateTime, nullable=True)

    metrics = relationship("EpochMetric", back_populates="run", cascade="all, delete-orphan",
                           order_by="EpochMetric.id")


class EpochMetric(Base):
    __tablename__ = "epoch_metrics"

    id = Column(Integer, primary_key=True)
    run_pk = Column(Integer, ForeignKey("training_runs.id"), nullable=False, index=True)
    epoch = Column(Integer, nullable=False)
    split = Column(String(10), nullable=False)  # train, val, test
    rmse = Column(Float, nullable=False)
    recorded_at = Column(DateTime, default=datetime.utcnow)

    run = relationship("TrainingRun", back_populates="metrics")


def database_path(run_dir) -> str:
    return os.path.join(str(run_dir), RUNTIME_CONFIG["database_name"])


def engine_for(run_dir):
    os.makedirs(str(run_dir), exist_ok=True)
    return create_engine(f"sqlite:///{database_path(run_dir)}", connect_args={"check_same_thread": False})


def init_db(engine):
    Base.metadata.create_all(bind=engine)


def session_for(run_dir) -> Session:
    """Session on the metrics database owned by run_dir, created on first use."""
    engine = engine_for(run_dir)
    init_db(engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)()
