"""slingsim: a simulated multi-tenant Slingshot RDMA stack.

Subsystems:
  fabric / fabric_api  simulated CXI NIC driver, per-node service
                       registries, VNI-enforcing switch, HTTP socket
  store / store_cli    transactional VNI database with reuse quarantine
                       and audit log (SQLite)
  endpoint             /sync and /finalize webhook service (ownership
                       models: per-resource VNIs and VNI claims)
  cni                  chained CNI plugin creating NETNS-member CXI
                       services for annotated pods
  cluster / world      cluster simulator (resources, controller loop,
                       scheduling, CNI invocation) and deployment wiring
  bench                ramp/spike admission-overhead experiments
"""

__version__ = "0.1.0"
