// placeholder until pipeline lands

