"""
Database Connection & Session Management
Experiment ledger on SQLite by default; any SQLAlchemy URL via MACO_DATABASE_URL
"""
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Generator, Optional

from loguru import logger
from sqlalchemy import create_engine, event, inspect
from sqlalchemy.engine import Engine, make_url
from sqlalchemy.orm import Session, sessionmaker
from sqlalchemy.pool import StaticPool

import config
from models import Base

# ============================================================================
# ENGINE CONFIGURATION
# ============================================================================

_engines: Dict[str, Engine] = {}
_session_factories: Dict[str, sessionmaker] = {}


def create_db_engine(database_url: str) -> Engine:
    """
    Create SQLAlchemy engine with settings for the URL's backend.

    SQLite gets a single shared connection and foreign keys on; the
    parent directory of a SQLite file is created if missing.
    """
    url = make_url(database_url)
    if url.get_backend_name() == "sqlite":
        if url.database and url.database != ":memory:":
            Path(url.database).parent.mkdir(parents=True, exist_ok=True)

        engine = create_engine(
            database_url,
            connect_args={
                "check_same_thread": False,
                "timeout": 30
            },
            poolclass=StaticPool,
            echo=False
        )

        @event.listens_for(engine, "connect")
        def set_sqlite_pragma(dbapi_conn, connection_record):
            cursor = dbapi_conn.cursor()
            cursor.execute("PRAGMA foreign_keys=ON")
            cursor.close()

        logger.debug(f"SQLite ledger engine: {database_url}")
    else:
        engine = create_engine(database_url, pool_pre_ping=True, echo=False)
        logger.debug(f"Ledger engine: {engine.url.get_backend_name()}")

    return engine


def get_engine(database_url: Optional[str] = None) -> Engine:
    """Engine for a URL, created once per process (default: config.DATABASE_URL)."""
    url = database_url or config.DATABASE_URL
    if url not in _engines:
        _engines[url] = create_db_engine(url)
        _session_factories[url] = sessionmaker(autocommit=False, autoflush=False, bind=_engines[url])
    return _engines[url]


def dispose_engines() -> None:
    for engine in _engines.values():
        engine.dispose()
    _engines.clear()
    _session_factories.clear()

# ============================================================================
# SESSION MANAGEMENT
# ============================================================================

@contextmanager
def get_db_session(database_url: Optional[str] = None) -> Generator[Session, None, None]:
    """
    Context manager for ledger sessions.

    Usage:
        with get_db_session() as db:
            runs = LedgerService(db).list_runs()

    Automatically commits on success, rolls back on error.
    """
    url = database_url or config.DATABASE_URL
    get_engine(url)
    db = _session_factories[url]()
    try:
        yield db
        db.commit()
    except Exception as e:
        db.rollback()
        logger.error(f"Database error, rolling back: {e}")
        raise
    finally:
        db.close()

# ============================================================================
# DATABASE INITIALIZATION
# ============================================================================

def init_db(database_url: Optional[str] = None, drop_existing: bool = False) -> None:
    """
    Create all ledger tables (idempotent).

    Args:
        database_url: Ledger URL (default: config.DATABASE_URL)
        drop_existing: Drop all tables first
    """
    engine = get_engine(database_url)
    if drop_existing:
        logger.warning("⚠️  Dropping all ledger tables...")
        Base.metadata.drop_all(bind=engine)

    Base.metadata.create_all(bind=engine)
    table_names = inspect(engine).get_table_names()
    logger.debug(f"Ledger has {len(table_names)} tables: {', '.join(table_names)}")
