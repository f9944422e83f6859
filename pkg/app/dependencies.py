from builtins import int, str
from concurrent.futures import Executor, ThreadPoolExecutor
from typing import Optional
from settings.config import Settings


def get_settings() -> Settings:
    """Return application settings."""
    return Settings()


def get_clock(name: Optional[str] = None):
    """Resolve a profiling clock by name, falling back to the configured default."""
    # Imported here: the profiler service itself depends on this module.
    from app.services.profiler_service import RooflineClock, WallClock

    settings = get_settings()
    clock_name = (name or settings.profile_clock).lower()
    if clock_name == "wall":
        return WallClock()
    if clock_name == "roofline":
        return RooflineClock(peak_macs_per_s=settings.roofline_peak_macs,
                             machine_balance=settings.roofline_machine_balance)
    raise ValueError(f"Unknown profiling clock '{clock_name}'")


def get_executor(workers: Optional[int] = None) -> Optional[Executor]:
    """Thread pool for per-layer spectra; None means compute inline."""
    size = workers if workers is not None else get_settings().spectra_workers
    if size <= 1:
        return None
    return ThreadPoolExecutor(max_workers=size, thread_name_prefix="spectra")
