# runtime/mailbox.py
"""Bounded per-actor mailboxes.

Messages from one sender to one receiver keep their order. A full mailbox
refuses new messages (``put`` returns False) so the sender can back off.
"""
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, List, Optional

from core.errors import MailboxClosedError


@dataclass(frozen=True)
class Envelope:
    sender: str
    receiver: str
    kind: str
    body: Any = None
    seq: int = 0
    deliver_at: int = 0


@dataclass
class Mailbox:
    owner: str
    capacity: Optional[int] = 1024
    _queue: Deque[Envelope] = field(default_factory=deque)
    _closed: bool = False
    _seq: Dict[str, int] = field(default_factory=dict)
    rejected: int = 0

    def __len__(self) -> int:
        return len(self._queue)

    @property
    def full(self) -> bool:
        return self.capacity is not None and len(self._queue) >= self.capacity

    @property
    def closed(self) -> bool:
        return self._closed

    def put(self, sender: str, kind: str, body: Any = None, deliver_at: int = 0) -> bool:
        if self._closed:
            raise MailboxClosedError(f"mailbox of {self.owner} is closed")
        if self.full:
            self.rejected += 1
            return False
        seq = self._seq.get(sender, 0) + 1
        self._seq[sender] = seq
        self._queue.append(Envelope(sender, self.owner, kind, body, seq, deliver_at))
        return True

    def get(self, now: Optional[int] = None) -> Optional[Envelope]:
        """Oldest message deliverable at ``now``.

        A delayed message holds back later messages from the same sender
        only; other senders pass it.
        """
        blocked = set()
        for i, env in enumerate(self._queue):
            if env.sender in blocked:
                continue
            if now is None or env.deliver_at <= now:
                del self._queue[i]
                return env
            blocked.add(env.sender)
        return None

    def discard(self, sender: str) -> int:
        """Drop every queued message from ``sender``; returns how many."""
        kept = deque(e for e in self._queue if e.sender != sender)
        dropped = len(self._queue) - len(kept)
        self._queue = kept
        return dropped

    def drain(self, now: Optional[int] = None) -> List[Envelope]:
        out = []
        while True:
            env = self.get(now)
            if env is None:
                return out
            out.append(env)

    def close(self):
        self._closed = True

    def reopen(self):
        self._closed = False
        self._queue.clear()
