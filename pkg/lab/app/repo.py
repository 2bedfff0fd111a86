from sqlalchemy.orm import Session
from sqlalchemy import desc
from typing import Dict, Iterable, List, Optional
from . import models


class AlertRepository:
    def __init__(self, db: Session):
        self.db = db

    def insert_alert(self, level: str, message: str) -> models.Alert:
        """Insert a new alert"""
        alert = models.Alert(level=level, message=message)
        self.db.add(alert)
        self.db.commit()
        self.db.refresh(alert)
        return alert

    def get_recent_alerts(self, limit: int = 50) -> List[models.Alert]:
        """Get recent alerts"""
        return self.db.query(models.Alert).order_by(desc(models.Alert.id)).limit(limit).all()


class RunRepository:
    def __init__(self, db: Session):
        self.db = db

    def start_run(self, config_hash: str, seed: int, variant: str, out_dir: Optional[str] = None) -> models.Run:
        """Record a run as started"""
        run = models.Run(config_hash=config_hash, seed=seed, variant=variant, status="running", out_dir=out_dir)
        self.db.add(run)
        self.db.commit()
        self.db.refresh(run)
        return run

    def finish_run(self, run_id: int, metrics: Dict[str, float], warmup_ciou: Optional[float],
                   wall_clock_s: float) -> Optional[models.Run]:
        """Store final metrics and mark the run done"""
        run = self.db.query(models.Run).filter(models.Run.id == run_id).first()
        if run:
            run.status = "done"
            run.ciou = metrics.get("ciou")
            run.auc = metrics.get("auc")
            run.mse = metrics.get("mse")
            run.max_f1 = metrics.get("max_f1")
            run.ap = metrics.get("ap")
            run.warmup_ciou = warmup_ciou
            run.wall_clock_s = wall_clock_s
            self.db.commit()
            self.db.refresh(run)
        return run

    def fail_run(self, run_id: int) -> Optional[models.Run]:
        run = self.db.query(models.Run).filter(models.Run.id == run_id).first()
        if run:
            run.status = "failed"
            self.db.commit()
            self.db.refresh(run)
        return run

    def recent_runs(self, limit: int = 20) -> List[models.Run]:
        """Get recent runs"""
        return self.db.query(models.Run).order_by(desc(models.Run.id)).limit(limit).all()


class TraceRepository:
    def __init__(self, db: Session):
        self.db = db

    def insert_traces(self, run_id: int, rows: Iterable[Dict[str, float]]) -> int:
        """Insert per-epoch trace rows for a run"""
        count = 0
        for row in rows:
            self.db.add(models.EpochTraceRow(run_id=run_id, **row))
            count += 1
        self.db.commit()
        return count

    def traces_for_run(self, run_id: int) -> List[models.EpochTraceRow]:
        return self.db.query(models.EpochTraceRow).filter(
            models.EpochTraceRow.run_id == run_id
        ).order_by(models.EpochTraceRow.epoch).all()
