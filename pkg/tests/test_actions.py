from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowsec.actions import (
    INFRASTRUCTURE_COMPROMISED,
    RATIONALE,
    ActionCode,
    RiskLevel,
    RiskThresholds,
    classify_risk,
    recommend_actions,
)
from flowsec.errors import ConfigError

TH = RiskThresholds()
CATALOG = [
    "TightenAccessControl", "RestartTrustedMode", "NotifyUser", "EnforceUserPolicy", "EnforceMixedPolicy",
    "DisableFeatureOrSensor", "BackupAndWipeSensitive", "BlockThirdPartySync", "NetworkLockdown",
    "AlternativeDefense", "RemoteDisable",
]


class TestClassify:
    def test_low(self):
        assert classify_risk(0, 0, 0) is RiskLevel.LOW

    def test_critical(self):
        assert classify_risk(0, 0, TH.dc * 1.0001) is RiskLevel.CRITICAL

    def test_elevated(self):
        assert classify_risk(TH.s + 0.01, TH.v, TH.dc) is RiskLevel.ELEVATED

    def test_high(self):
        assert classify_risk(TH.s + 0.01, TH.v + 0.01, 0) is RiskLevel.HIGH

    @pytest.mark.parametrize("kwargs", [dict(s=0), dict(v=1), dict(dc=0)])
    def test_bad_thresholds(self, kwargs):
        with pytest.raises(ConfigError):
            RiskThresholds(**kwargs)

    @given(st.floats(0, 0.999), st.floats(0, 0.999), st.floats(0, 1), st.floats(0, 0.5), st.integers(0, 2),
           st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(1e-4, 0.5))
    def test_monotone(self, s, v, dc, bump, which, ts, tv, tc):
        th = RiskThresholds(ts, tv, tc)
        raised = [s, v, dc]
        raised[which] = min(raised[which] + bump, 0.999 if which < 2 else 2.0)
        assert classify_risk(*raised, th) >= classify_risk(s, v, dc, th)


class TestRecommend:
    def test_low_empty(self):
        assert recommend_actions(RiskLevel.LOW).actions == ()

    def test_critical_order(self):
        rec = recommend_actions(RiskLevel.CRITICAL, "dev:x", "Device")
        assert [a.value for a in rec.actions] == [
            "NotifyUser", "TightenAccessControl",
            "EnforceUserPolicy", "BlockThirdPartySync", "DisableFeatureOrSensor",
            "RestartTrustedMode", "BackupAndWipeSensitive", "NetworkLockdown",
        ]
        assert len(rec.rationale) == 8

    def test_infrastructure_flag(self):
        rec = recommend_actions(RiskLevel.CRITICAL, flags=[INFRASTRUCTURE_COMPROMISED])
        assert rec.actions[-2:] == (ActionCode.ALTERNATIVE_DEFENSE, ActionCode.REMOTE_DISABLE)

    def test_infrastructure_flag_ignored_at_low(self):
        assert recommend_actions(RiskLevel.LOW, flags=[INFRASTRUCTURE_COMPROMISED]).actions == ()

    @pytest.mark.parametrize("flags", [(), (INFRASTRUCTURE_COMPROMISED,)])
    def test_superset_chain(self, flags):
        sets = [set(recommend_actions(level, flags=flags).actions) for level in RiskLevel]
        for lower, upper in zip(sets[1:], sets[2:]):
            assert lower < upper
        for level in RiskLevel:
            if level > RiskLevel.LOW:
                assert recommend_actions(level, flags=flags).actions

    def test_to_dict(self):
        d = recommend_actions(RiskLevel.ELEVATED, "app:d/a", "App").to_dict()
        assert d["risk"] == "Elevated" and d["actions"] == ["NotifyUser", "TightenAccessControl"]


def test_catalog_is_one_to_one():
    assert [a.value for a in ActionCode] == CATALOG
    assert sorted(a.catalog_item for a in ActionCode) == list(range(1, 12))
    assert {ActionCode(CATALOG[k - 1]).catalog_item for k in range(1, 12)} == set(range(1, 12))
    assert set(RATIONALE) == set(ActionCode)
