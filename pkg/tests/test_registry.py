"""Node registry: registration records, ttl expiry, tag filtering."""
import pytest

from mosden.api.registry import DEFAULT_TTL_S, NodeRegistration, RegistryState
from mosden.core import EngineError, ErrorKind, FakeClock


def registration(node_id="node-a", **kwargs) -> NodeRegistration:
    kwargs.setdefault("address", "127.0.0.1:9000")
    return NodeRegistration(node_id=node_id, **kwargs)


class TestRegistrationRecord:
    def test_round_trip(self):
        reg = registration(
            sensors=({"name": "vs-1", "output": [{"name": "value", "kind": "float"}]},),
            group_tag="lab",
            ttl_s=5,
        )
        again = NodeRegistration.from_obj(reg.to_obj())
        assert again == reg

    def test_defaults(self):
        reg = NodeRegistration.from_obj({"node_id": "n1", "address": "h:1"})
        assert reg.ttl_s == DEFAULT_TTL_S
        assert reg.sensors == () and reg.group_tag == ""

    @pytest.mark.parametrize(
        "obj",
        [
            "not a dict",
            {"address": "h:1"},
            {"node_id": "n1"},
            {"node_id": "n1", "address": "h:1", "sensors": "oops"},
            {"node_id": "bad id!", "address": "h:1"},
            {"node_id": "n1", "address": "h:1", "ttl_s": 0},
        ],
    )
    def test_malformed_rejected(self, obj):
        with pytest.raises(EngineError) as exc:
            NodeRegistration.from_obj(obj)
        # Bad identifiers are descriptor errors; both kinds are client errors.
        assert exc.value.kind in (ErrorKind.INVALID_QUERY, ErrorKind.INVALID_DESCRIPTOR)


class TestRegistryState:
    def test_register_stamps_time_and_lookup_returns_sorted(self):
        clock = FakeClock(50_000)
        reg = RegistryState(clock=clock)
        reg.register(registration("node-b"))
        reg.register(registration("node-a"))
        entries = reg.lookup()
        assert [e.node_id for e in entries] == ["node-a", "node-b"]
        assert all(e.registered_at == 50_000 for e in entries)

    def test_entry_expires_exactly_at_ttl(self):
        clock = FakeClock(0)
        reg = RegistryState(clock=clock)
        reg.register(registration(ttl_s=2))
        clock.set(1999)
        assert len(reg.lookup()) == 1
        clock.set(2000)  # expiry boundary is inclusive
        assert reg.lookup() == []

    def test_reregistration_refreshes_ttl(self):
        clock = FakeClock(0)
        reg = RegistryState(clock=clock)
        reg.register(registration(ttl_s=2))
        clock.set(1500)
        reg.register(registration(ttl_s=2, group_tag="updated"))
        clock.set(3000)  # would have expired at 2000 without the refresh
        entries = reg.lookup()
        assert len(entries) == 1
        assert entries[0].group_tag == "updated"
        assert entries[0].registered_at == 1500

    def test_tag_filter(self):
        reg = RegistryState(clock=FakeClock(0))
        reg.register(registration("n1", group_tag="east"))
        reg.register(registration("n2", group_tag="west"))
        reg.register(registration("n3", group_tag="east"))
        assert [e.node_id for e in reg.lookup(tag="east")] == ["n1", "n3"]
        assert reg.lookup(tag="nowhere") == []
        assert len(reg.lookup()) == 3

    def test_deregister(self):
        reg = RegistryState(clock=FakeClock(0))
        reg.register(registration("n1"))
        reg.deregister("n1")
        assert reg.lookup() == []
        with pytest.raises(EngineError) as exc:
            reg.deregister("n1")
        assert exc.value.kind is ErrorKind.NOT_FOUND

    def test_expired_entry_is_gone_not_stale(self):
        # After expiry the slot is free for a new registration with new data.
        clock = FakeClock(0)
        reg = RegistryState(clock=clock)
        reg.register(registration("n1", address="old:1", ttl_s=1))
        clock.set(5_000)
        assert reg.lookup() == []
        reg.register(registration("n1", address="new:2", ttl_s=1))
        assert reg.lookup()[0].address == "new:2"
