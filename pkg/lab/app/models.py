from sqlalchemy import Column, Integer, String, Float, DateTime, Text, ForeignKey, CheckConstraint
from sqlalchemy.sql import func
from .db import Base


class Run(Base):
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    ts = Column(DateTime(timezone=True), server_default=func.now(), nullable=False)
    config_hash = Column(String, nullable=False, index=True)
    seed = Column(Integer, nullable=False)
    variant = Column(String, nullable=False, index=True)
    status = Column(String, nullable=False)  # running, done, failed
    out_dir = Column(Text, nullable=True)
    ciou = Column(Float, nullable=True)
    auc = Column(Float, nullable=True)
    mse = Column(Float, nullable=True)
    max_f1 = Column(Float, nullable=True)
    ap = Column(Float, nullable=True)
    warmup_ciou = Column(Float, nullable=True)
    wall_clock_s = Column(Float, nullable=True)

    __table_args__ = (
        CheckConstraint("status IN ('running','done','failed')", name='check_valid_status'),
    )


class EpochTraceRow(Base):
    __tablename__ = "epoch_traces"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False, index=True)
    epoch = Column(Integer, nullable=False)
    ciou_val = Column(Float, nullable=True)
    auc_val = Column(Float, nullable=True)
    mse_val = Column(Float, nullable=True)
    n_accepted = Column(Integer, nullable=False)
    ipl_quality = Column(Float, nullable=True)
    fp_accept_rate = Column(Float, nullable=True)
    loss_sup = Column(Float, nullable=True)
    loss_unsup = Column(Float, nullable=True)

    __table_args__ = (
        CheckConstraint('epoch >= 1', name='check_positive_epoch'),
        CheckConstraint('n_accepted >= 0', name='check_nonnegative_accepted'),
    )


class Alert(Base):
    __tablename__ = "alerts"

    id = Column(Integer, primary_key=True, index=True)
    ts = Column(DateTime(timezone=True), server_default=func.now(), nullable=False)
    level = Column(String, nullable=False)
    message = Column(Text, nullable=False)

    __table_args__ = (
        CheckConstraint("level IN ('info','warn','error')", name='check_valid_level'),
    )
