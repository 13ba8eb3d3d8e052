"""Three-share polynomial authentication for a bank, its ATMs and smart cards."""

from .field import DEFAULT_MODULUS, FieldElement, Polynomial, SharePoint, interpolate, poly_eval, poly_shift
from .protocol import Atm, Bank, Card, FreshnessPolicy, ManualClock
from .session import SessionOutcome, run_session

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_MODULUS",
    "FieldElement",
    "Polynomial",
    "SharePoint",
    "interpolate",
    "poly_eval",
    "poly_shift",
    "Atm",
    "Bank",
    "Card",
    "FreshnessPolicy",
    "ManualClock",
    "SessionOutcome",
    "run_session",
]
