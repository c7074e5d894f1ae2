import threading
from dataclasses import dataclass, field

import numpy as np

# Thread-local storage
_thread_local = threading.local()


@dataclass
class WorkerContext:
    """Per-thread state of a parallel worker."""
    worker_id: int
    rng: np.random.Generator
    start: int = 0
    stop: int = 0
    gradients: list = field(default_factory=list)
    samples: int = 0


class ContextProxy:
    """Forward attribute access to the object bound to the current thread."""

    def __init__(self, name: str):
        self.name = name

    def update(self, obj: object) -> None:
        setattr(_thread_local, self.name, obj)

    def clear(self) -> None:
        if hasattr(_thread_local, self.name):
            delattr(_thread_local, self.name)

    @property
    def bound(self) -> bool:
        return getattr(_thread_local, self.name, None) is not None

    def __getattr__(self, item: str):
        obj = getattr(_thread_local, self.name)
        return getattr(obj, item, None)

    def __setattr__(self, key, value):
        if key == 'name':
            super().__setattr__(key, value)
            return
        obj = getattr(_thread_local, self.name)
        setattr(obj, key, value)


worker = ContextProxy('worker')
