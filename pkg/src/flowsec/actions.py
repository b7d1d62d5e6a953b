"""Risk classification and protection-action recommendations."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable

from .errors import ConfigError


class RiskLevel(enum.IntEnum):
    LOW = 0
    ELEVATED = 1
    HIGH = 2
    CRITICAL = 3

    @property
    def label(self) -> str:
        return self.name.capitalize()


class ActionCode(str, enum.Enum):
    """Protection actions; ``catalog_item`` is the position in the action catalog."""

    TIGHTEN_ACCESS_CONTROL = "TightenAccessControl"
    RESTART_TRUSTED_MODE = "RestartTrustedMode"
    NOTIFY_USER = "NotifyUser"
    ENFORCE_USER_POLICY = "EnforceUserPolicy"
    ENFORCE_MIXED_POLICY = "EnforceMixedPolicy"
    DISABLE_FEATURE_OR_SENSOR = "DisableFeatureOrSensor"
    BACKUP_AND_WIPE_SENSITIVE = "BackupAndWipeSensitive"
    BLOCK_THIRD_PARTY_SYNC = "BlockThirdPartySync"
    NETWORK_LOCKDOWN = "NetworkLockdown"
    ALTERNATIVE_DEFENSE = "AlternativeDefense"
    REMOTE_DISABLE = "RemoteDisable"

    @property
    def catalog_item(self) -> int:
        return list(ActionCode).index(self) + 1


RATIONALE = {
    ActionCode.TIGHTEN_ACCESS_CONTROL: "strengthen access control and authorization for this component",
    ActionCode.RESTART_TRUSTED_MODE: "degree of compromise is positive; restart into trusted execution mode and monitor future transactions",
    ActionCode.NOTIFY_USER: "inform the user of the current security state and available actions",
    ActionCode.ENFORCE_USER_POLICY: "restrict access to sensitive sites after interaction with low-sensitivity apps or ads",
    ActionCode.ENFORCE_MIXED_POLICY: "combine user behavior policy with system-driven control",
    ActionCode.DISABLE_FEATURE_OR_SENSOR: "disable risky applications, features or sensors under the updated policy",
    ActionCode.BACKUP_AND_WIPE_SENSITIVE: "back up device data and remove sensitive data and applications",
    ActionCode.BLOCK_THIRD_PARTY_SYNC: "block third-party synchronization for vulnerable applications",
    ActionCode.NETWORK_LOCKDOWN: "lock down network communication for this component",
    ActionCode.ALTERNATIVE_DEFENSE: "policy infrastructure is compromised; switch to alternative defense mechanisms",
    ActionCode.REMOTE_DISABLE: "advisory only: disable the device when local protection is out of reach",
}

_TIERS: dict[RiskLevel, tuple[ActionCode, ...]] = {
    RiskLevel.LOW: (),
    RiskLevel.ELEVATED: (ActionCode.NOTIFY_USER, ActionCode.TIGHTEN_ACCESS_CONTROL),
    RiskLevel.HIGH: (ActionCode.ENFORCE_USER_POLICY, ActionCode.BLOCK_THIRD_PARTY_SYNC,
                     ActionCode.DISABLE_FEATURE_OR_SENSOR),
    RiskLevel.CRITICAL: (ActionCode.RESTART_TRUSTED_MODE, ActionCode.BACKUP_AND_WIPE_SENSITIVE,
                         ActionCode.NETWORK_LOCKDOWN),
}
_INFRASTRUCTURE_ACTIONS = (ActionCode.ALTERNATIVE_DEFENSE, ActionCode.REMOTE_DISABLE)
INFRASTRUCTURE_COMPROMISED = "infrastructure_compromised"


@dataclass(frozen=True)
class RiskThresholds:
    s: float = 0.25
    v: float = 0.2
    dc: float = 0.005

    def __post_init__(self) -> None:
        if not 0.0 < self.s < 1.0:
            raise ConfigError(f"sensitivity threshold must be in (0,1), got {self.s}")
        if not 0.0 < self.v < 1.0:
            raise ConfigError(f"vulnerability threshold must be in (0,1), got {self.v}")
        if not self.dc > 0.0:
            raise ConfigError(f"degree-of-compromise threshold must be > 0, got {self.dc}")


def classify_risk(s: float, v: float, dc: float, thresholds: RiskThresholds = RiskThresholds()) -> RiskLevel:
    if dc > thresholds.dc:
        return RiskLevel.CRITICAL
    high_v = v > thresholds.v
    high_s = s > thresholds.s
    if high_v and high_s:
        return RiskLevel.HIGH
    if high_v or high_s:
        return RiskLevel.ELEVATED
    return RiskLevel.LOW


@dataclass(frozen=True)
class ActionRecommendation:
    entity_id: str
    risk: RiskLevel
    actions: tuple[ActionCode, ...]
    rationale: tuple[str, ...]
    kind: str | None = None

    def to_dict(self) -> dict:
        return {
            "entity": self.entity_id,
            "kind": self.kind,
            "risk": self.risk.label,
            "actions": [a.value for a in self.actions],
            "rationale": list(self.rationale),
        }


def recommend_actions(
    risk: RiskLevel,
    entity_id: str = "",
    kind: str | None = None,
    flags: Iterable[str] = (),
) -> ActionRecommendation:
    """Cumulative action list for *risk*; infrastructure actions need the flag."""
    actions: list[ActionCode] = []
    for level in RiskLevel:
        if level <= risk:
            actions.extend(_TIERS[level])
    if risk > RiskLevel.LOW and INFRASTRUCTURE_COMPROMISED in set(flags):
        actions.extend(_INFRASTRUCTURE_ACTIONS)
    return ActionRecommendation(entity_id, risk, tuple(actions), tuple(RATIONALE[a] for a in actions), kind)
