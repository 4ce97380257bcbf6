import logging
import os
import sys

# Ensure project root is on the import path for test execution
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from logic.bus import FastBus


def test_emit_delivers_named_arguments():
    """Handlers receive the emitted keyword arguments."""
    received = []
    local = FastBus()

    def handler(label, done):
        received.append((label, done))

    local.on("replicas:chunk_done", handler)
    local.emit("replicas:chunk_done", label="gap", done=128)

    assert received == [("gap", 128)]
    assert local.get_stats() == {"replicas:chunk_done": 1}


def test_off_removes_handler():
    received = []
    local = FastBus()
    handler = lambda **kw: received.append(kw)
    local.on("sweep:point_done", handler)
    local.off("sweep:point_done", handler)
    local.emit("sweep:point_done", eps=0.1)
    assert received == []


def test_failing_handler_is_logged_not_raised(caplog):
    local = FastBus()
    received = []

    def broken(**_):
        raise RuntimeError("boom")

    local.on("experiment:row", broken)
    local.on("experiment:row", lambda **kw: received.append(kw["row"]))
    with caplog.at_level(logging.ERROR):
        local.emit("experiment:row", row="delta1")
    assert received == ["delta1"]
    assert "boom" in caplog.text
