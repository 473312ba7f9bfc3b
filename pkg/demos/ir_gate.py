"""
Why coupling prices are only raised when nobody loses by it.

On a stress scenario the community may not import during the first hours
while one household must have its battery nearly full by then. Enforcing
that corridor needs a high export price, and the payments it creates can
leave some households worse off than on their own tariff. With the gate on,
a price step that would do that is skipped.

The gate holds whole rows at their current price. ADMM raises its prices
early, before the schedules settle, so its gate locks them in high and the
first household ends up worse off than without the gate. pFB moves its
prices more slowly and the gate keeps everyone whole, at the cost of a
corridor violation.

    python demos/ir_gate.py
"""

import numpy as np

from prosumer_gne import algorithms as alg
from prosumer_gne.harness import ir_stress_scenario

scenario = ir_stress_scenario()
for name in ("pfb", "admm"):
    for gate in (False, True):
        state, trace = alg.run(name, scenario, alg.StoppingRule(max_iter=400), gate=gate)
        price = alg.coupling_price(name, state, 0.1)
        excess = alg.mechanism_costs(state.x, price, scenario) - alg.base_case_costs(state.x, scenario)
        print(f"{name:4s} gate {'on ' if gate else 'off'}: excess per household {np.round(excess, 3)}, "
              f"corridor violation {trace.records[-1].primal_res:.3f}, frozen steps {state.gated_steps}")
