"""TCP bank daemon and ATM-side client.

Each connection carries any number of request/response frame pairs.  The
bank answers ``CertFetch``, ``BankAuthRequest`` and ``AuthzRequest``; a
malformed frame closes the connection without a reply.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading

from . import codec
from .protocol import Bank

log = logging.getLogger(__name__)


class ConnectionFailed(ConnectionError):
    pass


class PortInUse(OSError):
    pass


class _Handler(socketserver.BaseRequestHandler):
    server: "BankServer"

    def handle(self) -> None:
        sock: socket.socket = self.request
        sock.settimeout(self.server.io_timeout)
        while True:
            try:
                frame = codec.transport_recv(sock)
            except codec.PeerClosed:
                return
            except codec.TransportError as exc:
                log.warning("closing connection from %s: %s", self.client_address, exc)
                return
            reply = self.server.bank.handle_frame(frame)
            if reply is None:
                return
            try:
                codec.transport_send(sock, reply)
            except codec.TransportError:
                return


class BankServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, bank: Bank, host: str = "127.0.0.1", port: int = 0, io_timeout: float = 30.0) -> None:
        self.bank = bank
        self.io_timeout = io_timeout
        try:
            super().__init__((host, port), _Handler)
        except OSError as exc:
            raise PortInUse(f"cannot bind {host}:{port}: {exc}") from exc

    @property
    def port(self) -> int:
        return self.server_address[1]

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="sfamss-bank", daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        self.bank.store.save()


class BankClient:
    def __init__(self, host: str, port: int, timeout: float = 10.0) -> None:
        try:
            self.sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise ConnectionFailed(f"cannot reach bank at {host}:{port}: {exc}") from exc
        self.sock.settimeout(timeout)

    def exchange(self, frame: bytes) -> bytes | None:
        try:
            codec.transport_send(self.sock, frame)
            return codec.transport_recv(self.sock)
        except codec.PeerClosed:
            return None
        except codec.Timeout as exc:
            raise ConnectionFailed(str(exc)) from exc

    def close(self) -> None:
        self.sock.close()

    def __enter__(self) -> "BankClient":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
