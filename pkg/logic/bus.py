from typing import Dict, List, Callable
from collections import defaultdict
import logging
import time


class FastBus:
    """Synchronous event bus for progress and diagnostic events"""

    def __init__(self, slow_ms: float = 50.0):
        self._subscribers: Dict[str, List[Callable]] = defaultdict(list)
        self._event_stats = defaultdict(int)
        self._slow_ms = slow_ms
        self.logger = logging.getLogger(__name__)

    def on(self, event: str, callback: Callable):
        """Subscribe to event"""
        self._subscribers[event].append(callback)

    def off(self, event: str, callback: Callable):
        if callback in self._subscribers.get(event, []):
            self._subscribers[event].remove(callback)

    def clear(self):
        self._subscribers.clear()
        self._event_stats.clear()

    def emit(self, event: str, **kwargs):
        """Deliver event immediately with keyword arguments"""
        start_time = time.perf_counter()

        for callback in list(self._subscribers[event]):
            try:
                callback(**kwargs)
            except Exception as e:
                self.logger.error(f"Bus handler {getattr(callback, '__name__', callback)} failed on {event}: {e}")

        duration = (time.perf_counter() - start_time) * 1000
        self._event_stats[event] += 1

        if duration > self._slow_ms:
            self.logger.debug(f"Slow event {event}: {duration:.2f}ms")

    def get_stats(self) -> Dict[str, int]:
        """Get event statistics for monitoring"""
        return dict(self._event_stats)


bus = FastBus()
