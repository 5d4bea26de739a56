import os
import sys
import yaml

from deskinfer.config import ConfigManager
from deskinfer.runtime.mempool import plan_placement

path = sys.argv[1] if len(sys.argv) > 1 else 'config.yaml'

# Default configuration
config = ConfigManager._get_default_config()

# Save configuration to file
with open(path, 'w') as f:
    yaml.dump(config, f, default_flow_style=False, sort_keys=False)

print(f"Configuration file created: {path}")

# Example placement plan for --pool: keep 2 of 4 layers local, offload the rest to peers
model = config['model']
pool = config['pool']
plan = plan_placement(model['num_layers'], pool['local_capacity_layers'], pool['prefetch_depth'],
                      pool['peer_capacities'])
plan_path = os.path.join(os.path.dirname(os.path.abspath(path)), 'plan.yaml')
with open(plan_path, 'w') as f:
    yaml.dump(plan.to_dict(), f, default_flow_style=False, sort_keys=False)

print(f"Placement plan created: {plan_path}")
