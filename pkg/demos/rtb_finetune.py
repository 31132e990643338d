"""Relative trajectory balance: tilt a frozen prior by an external reward.

The posterior should sample x with probability p_prior(x) R_ext(x) / Z'. On
the toy domain both sides can be computed exactly, so the script prints how
far the finetuned sampler is from that target, and checks that the prior
parameters were not modified.

    python3 demos/rtb_finetune.py [steps]
"""
import math
import sys

from atomgfn.mdp import MDPConfig, MolMDP, enumerate_terminals
from atomgfn.policy import GraphPolicy, PolicyConfig, params_digest
from atomgfn.reward import ConditioningContext, PropertyBounds, PropertyConditional
from atomgfn.smiles import write
from atomgfn.trainer import TrainConfig, Trainer, exact_terminal_distribution

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600

mdp = MolMDP(MDPConfig(elements=("C", "O"), bond_orders=(1, 2), chirality=False, max_nodes=3))
ctx = ConditioningContext((PropertyConditional("MolWt", 28, 32, 0, 8),),
                          {"MolWt": PropertyBounds(10, 60, 0, 100)}, dims=4)


def external(x, _ctx):
    """Likes exactly one oxygen and more bonds."""
    n_o = sum(a.element == "O" for a in x.atoms)
    return (0.05, 1.0, 0.3, 0.02)[n_o] * (1 + len(x.bonds))


shape = GraphPolicy(mdp.config, ctx.encoding_size, PolicyConfig(num_emb=16, num_layers=2), seed=7)
prior = shape.with_params(shape.params.copy(requires_grad=False))
digest = params_digest(prior.params)

p_prior = exact_terminal_distribution(prior, prior.params, mdp, ctx.encode())
terminals = enumerate_terminals(mdp)
w = {k: p_prior[k] * external(g, ctx) for k, g in terminals.items()}
z = math.fsum(w.values())

policy = shape.with_params(shape.params.copy(requires_grad=True))
cfg = TrainConfig(beta=1, mix_ratio=1.0, learning_rate=1e-3, z_learning_rate=1e-2, batch_size=32,
                  random_action_prob=0.05, sample_conditionals=False, max_num_iter=steps)
trainer = Trainer(policy, mdp, cfg, ctx, "finetune_rtb", external, prior=prior)


def l1(p):
    return sum(abs(p.get(k, 0.0) - v / z) for k, v in w.items())


print(f"prior vs posterior target: L1 {l1(p_prior):.3f}")
for done in range(0, steps, 200):
    trainer.train(min(done + 200, steps))
    p = exact_terminal_distribution(policy, trainer.params, mdp, ctx.encode())
    print(f"step {trainer.step:4d}  L1 {l1(p):.4f}")

print("prior untouched:", params_digest(prior.params) == digest)
print("\nmolecule   prior    target   finetuned")
for k in sorted(w, key=w.get, reverse=True)[:6]:
    print(f"{write(terminals[k]):9s}  {p_prior[k]:.4f}   {w[k] / z:.4f}   {p.get(k, 0.0):.4f}")
