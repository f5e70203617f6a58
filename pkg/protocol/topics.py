"""Topic name and topic filter validation (MQTT 3.1.1 grammar)."""

from dataclasses import dataclass
from typing import Optional

MAX_TOPIC_BYTES = 65535


@dataclass(frozen=True)
class TopicCheck:
    """Validation result; ``reason`` is a machine-readable code when invalid."""
    valid: bool
    reason: Optional[str] = None

    def __bool__(self):
        return self.valid


VALID = TopicCheck(True)


def _common_checks(s: str) -> Optional[str]:
    if not s:
        return 'empty'
    if '\x00' in s:
        return 'null_character'
    if len(s.encode('utf-8')) > MAX_TOPIC_BYTES:
        return 'too_long'
    return None


def validate_topic_filter(s: str) -> TopicCheck:
    """
    Check a subscription filter.

    '+' must occupy a whole level; '#' must occupy the whole final level.
    """
    reason = _common_checks(s)
    if reason:
        return TopicCheck(False, reason)

    levels = s.split('/')
    for index, level in enumerate(levels):
        if '#' in level:
            if level != '#':
                return TopicCheck(False, 'multi_level_wildcard_not_whole_level')
            if index != len(levels) - 1:
                return TopicCheck(False, 'multi_level_wildcard_not_last')
        if '+' in level and level != '+':
            return TopicCheck(False, 'single_level_wildcard_not_whole_level')
    return VALID


def validate_topic_name(s: str) -> TopicCheck:
    """Check a PUBLISH topic name: no wildcards allowed."""
    reason = _common_checks(s)
    if reason:
        return TopicCheck(False, reason)
    if '+' in s or '#' in s:
        return TopicCheck(False, 'wildcard_in_topic_name')
    return VALID
