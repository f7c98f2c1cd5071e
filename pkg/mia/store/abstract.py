from abc import ABC, abstractmethod
import asyncio
from dataclasses import dataclass
from typing import Dict, List


@dataclass(frozen=True)
class RunRecord:
    run_id: int
    label: str
    fingerprint: str  # sha256 over ground truth and score matrices of the analyzed bundle
    created: int  # unix seconds
    report: Dict


class AbstractRunStore(ABC):
    """
    Base class for asyncio-related run history stores.
    """

    def __init__(self):
        self.lock = asyncio.Lock()
        self.connection = None

    @abstractmethod
    async def connect(self):
        """Perform IO-related initialization"""

    @abstractmethod
    async def add_run(self, label: str, fingerprint: str, report: Dict, created: int) -> int:
        """Persist an analysis report under ``label`` and return its run id"""

    @abstractmethod
    async def get_runs(self, label: str) -> List[RunRecord]:
        """Fetch every run stored under ``label``, oldest first"""

    @abstractmethod
    async def get_labels(self) -> List[str]:
        """Fetch all distinct labels, sorted"""

    @abstractmethod
    async def close(self):
        """Release the connection"""
