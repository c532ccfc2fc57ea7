"""
Event bus for stage progress.

The pipeline publishes; the CLI (and tests) subscribe. Handlers run
synchronously in publish order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Callable

# Event type constants
EVENT_RUN_STARTED = "run_started"
EVENT_STAGE_STARTED = "stage_started"
EVENT_STAGE_FINISHED = "stage_finished"
EVENT_GATE_FAILED = "gate_failed"
EVENT_ARTIFACT_WRITTEN = "artifact_written"
EVENT_RUN_FINISHED = "run_finished"


@dataclass
class Event:
    """Represents an event in a run."""

    type: str
    data: dict[str, Any]
    run_id: str
    timestamp: datetime = field(default_factory=datetime.now)

    def to_dict(self) -> dict[str, Any]:
        return {
            "type": self.type,
            "data": self.data,
            "run_id": self.run_id,
            "timestamp": self.timestamp.isoformat(),
        }


Handler = Callable[[Event], None]


class EventBus:
    """Minimal synchronous pub/sub. ``"*"`` subscribes to every event type."""

    def __init__(self) -> None:
        self._handlers: dict[str, list[Handler]] = {}

    def on(self, event_type: str, handler: Handler) -> None:
        self._handlers.setdefault(event_type, []).append(handler)

    def off(self, event_type: str, handler: Handler) -> None:
        if event_type in self._handlers:
            try:
                self._handlers[event_type].remove(handler)
            except ValueError:
                pass

    def publish(self, event: Event) -> None:
        for handler in list(self._handlers.get(event.type, [])):
            handler(event)
        for handler in list(self._handlers.get("*", [])):
            handler(event)

    def emit(self, event_type: str, run_id: str, **data: Any) -> Event:
        event = Event(type=event_type, data=data, run_id=run_id)
        self.publish(event)
        return event


# Global event bus instance
_event_bus: EventBus | None = None


def get_event_bus() -> EventBus:
    """Get or create the global event bus instance."""
    global _event_bus
    if _event_bus is None:
        _event_bus = EventBus()
    return _event_bus


def reset_event_bus() -> None:
    """Reset the global event bus (useful for testing)."""
    global _event_bus
    _event_bus = None
