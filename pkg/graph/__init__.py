# Scene graph store, keyframe store, persistence and export
