"""
Services package - Ledger operations
"""
from .ledger_service import LedgerService

__all__ = [
    'LedgerService',
]
