from contextlib import contextmanager
from typing import Callable, Iterator, Optional

from sqlalchemy import create_engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

from .config import settings


def make_engine(url: str):
    """SQLAlchemy engine for the run ledger; SQLite connections are shared across ablation threads"""
    return create_engine(
        url,
        pool_pre_ping=True,
        connect_args={"check_same_thread": False} if url.startswith("sqlite") else {}
    )


# Ledger engine from DB_URL
engine = make_engine(settings.DB_URL)

SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=engine)

Base = declarative_base()


@contextmanager
def ledger_session(factory: Optional[Callable[[], Session]] = None) -> Iterator[Session]:
    """Session from ``factory`` (default: the DB_URL ledger), rolled back on error and always closed"""
    db = (factory or SessionLocal)()
    try:
        yield db
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()


def create_tables(bind=None):
    """Create the runs, epoch_traces and alerts tables"""
    Base.metadata.create_all(bind=bind or engine)
