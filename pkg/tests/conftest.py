import pytest
import torch

from owetc.flows import BackgroundMeta, FlowRecord, PacketView

torch.set_num_threads(1)


def make_flow(flow_id="f0", label="a", packets=None, dst=("1.2.3.4", 443), sni=None, cert=None):
    if packets is None:
        packets = [PacketView("+", 328, bytes.fromhex("1a2b034562aa")), PacketView("-", 1074, b"\x01\x02")]
    return FlowRecord(flow_id, label, tuple(packets), BackgroundMeta(dst[0], dst[1], sni, cert))


@pytest.fixture
def flow_factory():
    return make_flow


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
