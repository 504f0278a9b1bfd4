class PipelineCommands:
    GenDataCommand = "gen-data"
    TrainCommand = "train"
    ReconstructCommand = "reconstruct"
    RefineCommand = "refine"
    EvalCommand = "eval"
    ExportCommand = "export"
