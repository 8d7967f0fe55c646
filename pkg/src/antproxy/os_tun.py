"""Real /dev/net/tun backend.

Needs CAP_NET_ADMIN and a configured interface, so nothing in the test suite
depends on it; the simulated port covers the engine contract.  This exists so
the same engine can be pointed at real traffic:

    ip tuntap add dev ant0 mode tun user $USER
    ip addr add 10.0.2.1/24 dev ant0 && ip link set ant0 up
    antproxy run --backend os --tun-name ant0
"""

from __future__ import annotations

import fcntl
import os
import select
import struct

TUNSETIFF = 0x400454CA
IFF_TUN = 0x0001
IFF_NO_PI = 0x1000


class OsTunPort:
    """Engine-side view of a kernel tun device; mirrors TunPort's surface."""

    def __init__(self, name: str = "ant0", mtu: int = 16384):
        self.mtu = mtu
        self.closed = False
        self.fd = os.open("/dev/net/tun", os.O_RDWR)
        try:
            ifr = struct.pack("16sH", name.encode()[:15], IFF_TUN | IFF_NO_PI)
            fcntl.ioctl(self.fd, TUNSETIFF, ifr)
        except OSError:
            os.close(self.fd)
            raise
        self.name = name

    def read(self, timeout: float | None = None) -> bytes | None:
        if self.closed:
            from .net_harness import PortClosed

            raise PortClosed(self.name)
        r, _, _ = select.select([self.fd], [], [], timeout)
        if not r:
            return None
        return os.read(self.fd, self.mtu)

    def write(self, datagram: bytes) -> None:
        os.write(self.fd, datagram)

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            os.close(self.fd)
