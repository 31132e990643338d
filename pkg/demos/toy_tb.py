"""Train a sampler on a domain small enough to enumerate.

Molecules have at most three heavy atoms from {C, O}. The reward prefers a
molecular weight of 28-32. Every terminal state can be listed, so the target
distribution R(x)/Z is known exactly and we can watch the sampler approach it.

    python3 demos/toy_tb.py [steps]
"""
import math
import sys

from atomgfn.mdp import MDPConfig, MolMDP, enumerate_terminals
from atomgfn.policy import GraphPolicy, PolicyConfig
from atomgfn.reward import ConditioningContext, PropertyBounds, PropertyConditional, aggregate_reward
from atomgfn.smiles import write
from atomgfn.trainer import TrainConfig, Trainer, exact_terminal_distribution

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000

mdp = MolMDP(MDPConfig(elements=("C", "O"), bond_orders=(1, 2), chirality=False, max_nodes=3))
ctx = ConditioningContext((PropertyConditional("MolWt", 28, 32, 0, 8),),
                          {"MolWt": PropertyBounds(10, 60, 0, 100)}, dims=4)

terminals = enumerate_terminals(mdp)
reward = {k: aggregate_reward(g, ctx) for k, g in terminals.items()}
z = math.fsum(reward.values())
print(f"{len(terminals)} terminal molecules, log Z = {math.log(z):.4f}")

policy = GraphPolicy(mdp.config, ctx.encoding_size, PolicyConfig(num_emb=16, num_layers=2))
cfg = TrainConfig(beta=1, mix_ratio=1.0, learning_rate=1e-3, z_learning_rate=1e-2, batch_size=32,
                  random_action_prob=0.05, sample_conditionals=False, max_num_iter=steps)
trainer = Trainer(policy, mdp, cfg, ctx, "tasktrain", aggregate_reward)


def l1_to_target():
    p = exact_terminal_distribution(policy, trainer.params, mdp, ctx.encode())
    return sum(abs(p.get(k, 0.0) - r / z) for k, r in reward.items()), p


for done in range(0, steps, 250):
    trainer.train(min(done + 250, steps))
    dist, _ = l1_to_target()
    logz = float(policy.log_z(trainer.params, ctx.encode()[None]).data[0])
    print(f"step {trainer.step:5d}  L1 to R/Z {dist:.4f}  learned log Z {logz:.4f}")

_, p = l1_to_target()
print("\nmolecule   target   sampler")
for k in sorted(reward, key=reward.get, reverse=True)[:8]:
    print(f"{write(terminals[k]):9s}  {reward[k] / z:.4f}   {p.get(k, 0.0):.4f}")
