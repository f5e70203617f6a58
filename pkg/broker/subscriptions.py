"""Subscription table and topic filter matching for the broker stub."""

import threading
from dataclasses import dataclass
from typing import Any, Dict, List


def match_filter(topic_filter: str, topic: str) -> bool:
    """
    Level-wise MQTT topic matching.

    '+' matches exactly one level; '#' matches the rest of the topic,
    including the parent level ("sport/#" matches "sport").
    """
    if topic.startswith('$') and topic_filter[:1] in ('+', '#'):
        return False
    filter_levels = topic_filter.split('/')
    topic_levels = topic.split('/')
    for i, level in enumerate(filter_levels):
        if level == '#':
            return True
        if i >= len(topic_levels):
            return False
        if level != '+' and level != topic_levels[i]:
            return False
    return len(filter_levels) == len(topic_levels)


@dataclass
class Subscription:
    session: Any
    topic_filter: str
    granted_qos: int


class SubscriptionTable:
    """
    Flat list of (session, filter, granted QoS).

    (session, filter) is unique: subscribing again replaces the granted QoS.
    All access goes through one lock.
    """

    def __init__(self):
        self._entries: List[Subscription] = []
        self._lock = threading.Lock()

    def subscribe(self, session, topic_filter: str, granted_qos: int) -> None:
        with self._lock:
            for entry in self._entries:
                if entry.session is session and entry.topic_filter == topic_filter:
                    entry.granted_qos = granted_qos
                    return
            self._entries.append(Subscription(session, topic_filter, granted_qos))

    def unsubscribe(self, session, topic_filter: str) -> bool:
        with self._lock:
            before = len(self._entries)
            self._entries = [e for e in self._entries
                             if not (e.session is session and e.topic_filter == topic_filter)]
            return len(self._entries) != before

    def remove_session(self, session) -> None:
        with self._lock:
            self._entries = [e for e in self._entries if e.session is not session]

    def matching(self, topic: str) -> Dict[Any, int]:
        """Sessions with at least one matching filter, each with its highest granted QoS."""
        with self._lock:
            matches: Dict[Any, int] = {}
            for entry in self._entries:
                if match_filter(entry.topic_filter, topic):
                    matches[entry.session] = max(entry.granted_qos, matches.get(entry.session, 0))
            return matches

    def entries(self) -> List[Subscription]:
        with self._lock:
            return list(self._entries)

    def __len__(self):
        with self._lock:
            return len(self._entries)
