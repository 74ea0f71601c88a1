# Event triggers, BEV rendering and the bottom-up map update
