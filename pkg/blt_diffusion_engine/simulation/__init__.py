# Simulation package initialization