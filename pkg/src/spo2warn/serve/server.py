"""Line-protocol server over TCP, a unix socket or stdin/stdout; HTTP via FastAPI.

Endpoints:

* ``tcp://HOST:PORT``
* ``unix:///path/to/socket``
* ``stdio`` (or ``-``)
* ``http://HOST:PORT`` runs the FastAPI app under uvicorn
"""

from __future__ import annotations

import asyncio
import logging
import signal
import sys
from dataclasses import dataclass
from typing import Callable, TextIO
from urllib.parse import urlparse

from ..artifact import ModelArtifact
from .session import StreamHandler

logger = logging.getLogger(__name__)


class EndpointError(ValueError):
    pass


@dataclass(frozen=True)
class Endpoint:
    scheme: str
    host: str = ""
    port: int = 0
    path: str = ""


def parse_endpoint(spec: str) -> Endpoint:
    if spec in ("stdio", "-"):
        return Endpoint("stdio")
    url = urlparse(spec)
    if url.scheme in ("tcp", "http"):
        try:
            port = url.port
        except ValueError:
            port = None
        if not url.hostname or port is None:
            raise EndpointError(f"{spec!r}: expected {url.scheme}://HOST:PORT")
        return Endpoint(url.scheme, url.hostname, port)
    if url.scheme == "unix":
        path = url.netloc + url.path
        if not path:
            raise EndpointError(f"{spec!r}: expected unix:///path/to/socket")
        return Endpoint("unix", path=path)
    raise EndpointError(f"{spec!r}: unsupported endpoint (use tcp://, unix://, http:// or stdio)")


def serve_stdio(handler: StreamHandler, stdin: TextIO = sys.stdin, stdout: TextIO = sys.stdout) -> int:
    """Serve until end of input; SIGINT/SIGTERM end the loop between lines."""
    def _stop(signum, frame):
        raise KeyboardInterrupt

    previous = signal.signal(signal.SIGTERM, _stop) if _is_main_thread() else None
    try:
        for line in stdin:
            out = handler.handle_line(line)
            if out is not None:
                stdout.write(out + "\n")
                stdout.flush()
    except KeyboardInterrupt:
        pass
    finally:
        if previous is not None:
            signal.signal(signal.SIGTERM, previous)
    return 0


def _is_main_thread() -> bool:
    import threading

    return threading.current_thread() is threading.main_thread()


async def _serve_socket(handler: StreamHandler, ep: Endpoint, ready: Callable[[str], None] | None) -> int:
    loop = asyncio.get_running_loop()
    stop = asyncio.Event()
    active: set[asyncio.Task] = set()

    async def client(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        task = asyncio.current_task()
        active.add(task)
        try:
            while not stop.is_set():
                try:
                    raw = await reader.readline()
                except (ConnectionError, asyncio.LimitOverrunError, ValueError):
                    break
                if not raw:
                    break
                out = handler.handle_line(raw.decode("utf-8", errors="replace"))
                if out is not None:
                    writer.write(out.encode() + b"\n")
                    await writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass
        finally:
            active.discard(task)
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, asyncio.CancelledError):
                pass

    if ep.scheme == "tcp":
        server = await asyncio.start_server(client, ep.host, ep.port)
        sock = server.sockets[0].getsockname()
        where = f"tcp://{sock[0]}:{sock[1]}"
    else:
        server = await asyncio.start_unix_server(client, ep.path)
        where = f"unix://{ep.path}"
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):
            pass
    logger.info("listening on %s", where)
    if ready is not None:
        ready(where)
    async with server:
        await stop.wait()
        server.close()
        # responses already written are flushed when each client's transport closes
        for task in list(active):
            task.cancel()
        await asyncio.gather(*active, return_exceptions=True)
    return 0


def run_server(
    artifact: ModelArtifact,
    listen: str,
    attrib: bool = False,
    ready: Callable[[str], None] | None = None,
) -> int:
    """Block serving ``artifact`` on ``listen`` until shutdown; returns the exit code."""
    ep = parse_endpoint(listen)
    if ep.scheme == "http":
        import uvicorn

        from .app import create_app

        uvicorn.run(create_app(artifact, attrib=attrib), host=ep.host, port=ep.port, log_level="warning")
        return 0
    handler = StreamHandler(artifact, attrib=attrib)
    if ep.scheme == "stdio":
        if ready is not None:
            ready("stdio")
        return serve_stdio(handler)
    try:
        return asyncio.run(_serve_socket(handler, ep, ready))
    except OSError as exc:
        raise EndpointError(f"cannot listen on {listen}: {exc}") from exc
