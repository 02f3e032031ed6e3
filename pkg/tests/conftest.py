import numpy as np
import pytest

from hedgezero.market import nine_state_chain, two_state_chain
from hedgezero.replication import ConstraintSpec, CostSpec, PayoffSpec, ReplicationMdp, UtilitySpec


def trinomial_cost_mdp():
    return ReplicationMdp(
        horizon=5,
        constraints=ConstraintSpec(tuple(np.arange(20) / 20)),
        cost=CostSpec("capped_proportional", rate=0.25, cap=0.05),
        utility=UtilitySpec("mse_loss"),
        payoff=PayoffSpec("short_call", 5.0),
        p0=0.4,
        init_holdings=0.4,
        reward_scale=8.0,
    )


def uct_mdp():
    """Two steps on the two-state chain; the middle hedge replicates the claim exactly."""
    return ReplicationMdp(
        horizon=2,
        constraints=ConstraintSpec((0.0, 0.5, 1.0)),
        utility=UtilitySpec("mse_loss"),
        payoff=PayoffSpec("short_call", 1.5),
        reward_scale=0.5,
    )


@pytest.fixture(scope="session")
def tc_mdp():
    return trinomial_cost_mdp()


@pytest.fixture(scope="session")
def chain9():
    return nine_state_chain()


@pytest.fixture(scope="session")
def chain2():
    return two_state_chain()


@pytest.fixture(scope="session")
def tc_table(tc_mdp, chain9):
    from hedgezero.dp import solve

    return solve(tc_mdp, chain9)


def pytest_addoption(parser):
    parser.addoption("--statistical", action="store_true", default=False,
                     help="also run the stochastic, long-running acceptance criteria")


@pytest.fixture(scope="session")
def report(request):
    """Write one line straight to the terminal, bypassing output capture."""
    tr = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(line):
        if tr is not None:
            tr.write_line(line)
        else:
            print(line)

    return emit
