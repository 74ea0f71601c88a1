# Seeded worlds, sequences, query banks and brute-force oracles
