"""Client side of the node HTTP protocol.

    GET  /chunks/<name>     whole chunk, or a byte range with ``Range: bytes=a-b``
    PUT  /chunks/<name>     store a chunk (header + payload)
    GET  /hosts             host list, one record per line
    POST /gossip            gossip message; a pull is answered with records

Each request uses a fresh connection; the server closes after responding.
"""

from __future__ import annotations

import http.client
import urllib.parse

from .membership import GossipMessage, HostList
from .placement import ChunkName

DEFAULT_TIMEOUT = 5.0


class ChunkNotFound(LookupError):
    pass


class TransferError(ConnectionError):
    """Transfer broke off; ``partial`` holds the bytes received before that."""

    def __init__(self, message: str, partial: bytes = b""):
        super().__init__(message)
        self.partial = partial


class RemoteError(RuntimeError):
    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body}")
        self.status = status


def _split(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    return host, int(port)


def chunk_path(name: ChunkName | str) -> str:
    return "/chunks/" + urllib.parse.quote(str(name), safe="")


def request(address: str, method: str, path: str, body: bytes | None = None,
            headers: dict | None = None, timeout: float = DEFAULT_TIMEOUT) -> tuple[int, dict, bytes]:
    host, port = _split(address)
    conn = http.client.HTTPConnection(host, port, timeout=timeout)
    try:
        try:
            conn.request(method, path, body=body, headers=headers or {})
            resp = conn.getresponse()
        except (OSError, http.client.HTTPException) as exc:
            raise TransferError(f"{method} {address}{path}: {exc}") from exc
        try:
            data = resp.read()
        except http.client.IncompleteRead as exc:
            raise TransferError(f"{method} {address}{path}: truncated body", bytes(exc.partial)) from exc
        except (OSError, http.client.HTTPException) as exc:
            raise TransferError(f"{method} {address}{path}: {exc}") from exc
        return resp.status, {k.lower(): v for k, v in resp.getheaders()}, data
    finally:
        conn.close()


def get_chunk(address: str, name: ChunkName | str, start: int | None = None, end: int | None = None,
              timeout: float = DEFAULT_TIMEOUT) -> bytes:
    headers = {}
    if start is not None:
        headers["Range"] = f"bytes={start}-{'' if end is None else end}"
    status, _, data = request(address, "GET", chunk_path(name), headers=headers, timeout=timeout)
    if status == 404:
        raise ChunkNotFound(str(name))
    if status not in (200, 206):
        raise RemoteError(status, data.decode(errors="replace"))
    return data


def put_chunk(address: str, name: ChunkName | str, data: bytes, timeout: float = DEFAULT_TIMEOUT) -> None:
    status, _, body = request(address, "PUT", chunk_path(name), body=data,
                              headers={"Content-Type": "application/octet-stream"}, timeout=timeout)
    if status not in (200, 201, 204):
        raise RemoteError(status, body.decode(errors="replace"))


def get_hosts(address: str, timeout: float = DEFAULT_TIMEOUT) -> HostList:
    status, _, body = request(address, "GET", "/hosts", timeout=timeout)
    if status != 200:
        raise RemoteError(status, body.decode(errors="replace"))
    return HostList.parse(body.decode())


def post_gossip(address: str, msg: GossipMessage, timeout: float = DEFAULT_TIMEOUT) -> GossipMessage | None:
    status, _, body = request(address, "POST", "/gossip", body=msg.encode(),
                              headers={"Content-Type": "text/plain"}, timeout=timeout)
    if status == 204 or (status == 200 and not body):
        return None
    if status != 200:
        raise RemoteError(status, body.decode(errors="replace"))
    return GossipMessage.decode(body)
