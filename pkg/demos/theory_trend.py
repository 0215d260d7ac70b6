"""Mean of max |z| over alpha shrinks as more first-layer weights are shared."""
from tnalign.theory import TheoryConfig, rho_trend

cfg = TheoryConfig(h=128, d=16, n_x=1024)
t = rho_trend(cfg, trials=20)
for rho, z in zip(t["rho_U"], t["mean_max_z"]):
    print(f"rho_U={rho:.2f}  mean max|z| = {z:.4f}")
print("spearman:", round(t["spearman"], 3))
