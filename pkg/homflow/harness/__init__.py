# Scenario configuration, binary field IO and run orchestration
