# %% [markdown]
# # End-to-end scenarios
#
# The harness runs miners, producers, watchers and users in lockstep
# rounds from one seed, writes every observable action to a JSON-lines log,
# and judges the log with invariant checks.  The same runs are available
# from the command line as `sidechain run <name>`.

# %%
from sidechain.harness import bundled_scenarios, load_scenario, replay_verify, run

for name in bundled_scenarios():
    sc = load_scenario(name)
    print(f"{name:<20} {sc.description}")

# %% [markdown]
# ## A fraud scenario
#
# A byzantine producer posts an unbalanced block; a watcher proves it and
# the honest producer rebuilds the height.

# %%
result = run(load_scenario("fraud"))
for name, check in result.verdict.checks.items():
    print(f"  {name:<24} {'pass' if check.passed else 'FAIL'}")
print("fraud events:", result.metrics["fraud_events"])
print("inclusion latency:", result.metrics["inclusion_latency"])

# %% [markdown]
# ## Replay
#
# The log is a pure function of the scenario and seed, so it can be
# re-derived and compared byte for byte.

# %%
text = result.log.dumps()
print("replay identical:", replay_verify(text, load_scenario("fraud")).identical)

# %% [markdown]
# ## When the security assumption breaks
#
# If watchers are censored for a full finalization delay, the invalid block
# finalizes.  The scenario declares the checks it expects to fail.

# %%
bad = run(load_scenario("censor-majority"))
print("failed checks:", sorted(bad.verdict.failed), "| as declared:", bad.verdict.as_expected)
